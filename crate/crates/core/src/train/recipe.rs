//! Training recipes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    CosineAnnealing,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VictimKind {
    MembershipVictim,
    AttributeVictim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    /// `(beta1, beta2)` for Adam variants, `(momentum, 0)` for SGD.
    pub momentum_or_betas: (f32, f32),
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub mixup: Option<f32>,
    pub cutmix: Option<f32>,
    pub label_smoothing: Option<f32>,
}

pub fn default_recipe(kind: VictimKind) -> RecipeConfig {
    match kind {
        VictimKind::MembershipVictim => RecipeConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 0.001,
            weight_decay: 0.05,
            momentum_or_betas: (0.9, 0.999),
            schedule: Schedule::CosineAnnealing,
            epochs: 300,
            batch_size: 256,
            mixup: Some(0.8),
            cutmix: Some(1.0),
            label_smoothing: None,
        },
        VictimKind::AttributeVictim => RecipeConfig {
            optimizer: OptimizerKind::SGD,
            lr: 0.01,
            weight_decay: 0.0005,
            momentum_or_betas: (0.9, 0.0),
            schedule: Schedule::CosineAnnealing,
            epochs: 100,
            batch_size: 256,
            mixup: None,
            cutmix: None,
            label_smoothing: None,
        },
    }
}

/// Fields to replace in a recipe; `None` keeps the original value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeOverrides {
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f32>,
    pub weight_decay: Option<f32>,
    pub momentum_or_betas: Option<(f32, f32)>,
    pub schedule: Option<Schedule>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// `Some(None)` switches the augmentation off.
    pub mixup: Option<Option<f32>>,
    pub cutmix: Option<Option<f32>>,
    pub label_smoothing: Option<Option<f32>>,
}

impl RecipeConfig {
    pub fn with(mut self, o: &RecipeOverrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { self.$f = v; } )* };
        }
        take!(optimizer, lr, weight_decay, momentum_or_betas, schedule, epochs, batch_size, mixup, cutmix, label_smoothing);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("recipe: lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("recipe: epochs and batch_size must be at least 1"));
        }
        for (name, v) in [("mixup", self.mixup), ("cutmix", self.cutmix)] {
            if matches!(v, Some(a) if !(a > 0.0)) {
                return Err(Error::config(format!("recipe: {name} alpha must be positive")));
            }
        }
        if matches!(self.label_smoothing, Some(e) if !(0.0..1.0).contains(&e)) {
            return Err(Error::config("recipe: label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            betas: self.momentum_or_betas,
            eps: 1e-8,
        }
    }

    pub fn hash(&self) -> String {
        crate::util::sha256_json(self)
    }
}
