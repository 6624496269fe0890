//! Experiment configuration documents (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aia::ExtractionPoint;
use crate::arch::{param_layout, spec_for_step, tiny_vit, ArchSpec, ModuleTag, Selection, VitSpec};
use crate::defense::{apply_component_defense, ComponentToggle};
use crate::error::{Error, Result};
use crate::gia::{CaptureMode, GiaConfig, DEFAULT_SNAPSHOTS};
use crate::train::{default_recipe, AttributeMode, RecipeConfig, RecipeOverrides, VictimKind};

pub const SCHEMA_VERSION: u32 = 1;

/// GIA iterations at desk scale; paper scale keeps the attack default.
pub const DESK_GIA_ITERATIONS: usize = 1000;
pub const DESK_EPOCHS: usize = 30;
pub const DESK_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    MiaNetwork,
    MiaLira,
    Aia,
    GiaLadder,
    GiaSegmentViT,
    ActivationAblation,
    PatchifyLnAblation,
    DefenseComponents,
    DefenseDpsgd,
    DefenseDpsgdStem,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::MiaNetwork => "MiaNetwork",
            Preset::MiaLira => "MiaLira",
            Preset::Aia => "Aia",
            Preset::GiaLadder => "GiaLadder",
            Preset::GiaSegmentViT => "GiaSegmentViT",
            Preset::ActivationAblation => "ActivationAblation",
            Preset::PatchifyLnAblation => "PatchifyLnAblation",
            Preset::DefenseComponents => "DefenseComponents",
            Preset::DefenseDpsgd => "DefenseDpsgd",
            Preset::DefenseDpsgdStem => "DefenseDpsgdStem",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        use Preset::*;
        [
            MiaNetwork,
            MiaLira,
            Aia,
            GiaLadder,
            GiaSegmentViT,
            ActivationAblation,
            PatchifyLnAblation,
            DefenseComponents,
            DefenseDpsgd,
            DefenseDpsgdStem,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }

    /// Presets that invert gradients rather than train victims.
    pub fn is_gia(self) -> bool {
        matches!(
            self,
            Preset::GiaLadder | Preset::GiaSegmentViT | Preset::ActivationAblation | Preset::PatchifyLnAblation
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Full model sizes, the documented training recipes and full-length
    /// inversions instead of the desk defaults.
    #[serde(default)]
    pub paper_scale: bool,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub recipe: RecipeOverrides,
    #[serde(default)]
    pub gia: GiaSection,
    #[serde(default)]
    pub mia: MiaSection,
    #[serde(default)]
    pub aia: AiaSection,
    #[serde(default)]
    pub defense: DefenseSection,
}

/// Synthetic data. Unset fields take preset defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub side: usize,
    pub classes: usize,
    /// Pixel noise; 0.05 for inversion targets, 0.15 for training sets.
    pub noise: Option<f32>,
    pub signal: f32,
    /// Generator seed, offset by the experiment seed; 0 for inversion
    /// targets, 11 for training sets.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { side: 16, classes: 10, noise: None, signal: 0.5, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Ladder steps for `GiaLadder`; every buildable step when unset.
    pub steps: Option<Vec<u8>>,
    /// Ladder step of the victim or base model of the other presets; 9
    /// for the activation ablation, 12 otherwise.
    pub step: Option<u8>,
    /// Width divisor of the desk models; 4 for inversions, 16 for victims.
    pub width_divisor: Option<usize>,
    pub vit: VitSpec,
    /// Explicit victim architecture, replacing `step`.
    pub architecture: Option<ArchSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            steps: None,
            step: None,
            width_divisor: None,
            vit: VitSpec { patch: 4, dim: 64, depth: 4, heads: 4, mlp_ratio: 4.0 },
            architecture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GiaSection {
    pub iterations: Option<usize>,
    pub lr: f32,
    pub tv_weight: f32,
    pub lr_decay: bool,
    pub capture_mode: CaptureMode,
    /// `GiaSegmentViT` selections: `"All"` or tag names joined by `+`.
    pub selections: Option<Vec<String>>,
    pub snapshots: Vec<usize>,
}

impl Default for GiaSection {
    fn default() -> Self {
        let d = GiaConfig::default();
        Self {
            iterations: None,
            lr: d.lr,
            tv_weight: d.tv_weight,
            lr_decay: d.lr_decay,
            capture_mode: d.capture_mode,
            selections: None,
            snapshots: DEFAULT_SNAPSHOTS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaSection {
    /// Candidate pool; 256 for LiRA and the DP sweeps, 512 for the
    /// four-way split of the network attack.
    pub pool: Option<usize>,
    pub shadows: usize,
    /// Held-out examples for victim test accuracy.
    pub test_size: usize,
    /// Victims per seed, sharing one shadow ensemble.
    pub victims: usize,
}

impl Default for MiaSection {
    fn default() -> Self {
        Self { pool: None, shadows: 16, test_size: 1024, victims: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttributeSetting {
    Independent,
    Rendered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaSection {
    pub attribute: AttributeSetting,
    /// Tint amplitude of a rendered attribute.
    pub strength: f32,
    pub attribute_classes: usize,
    /// Images split four ways; each quarter is 1024 at the default.
    pub pool: usize,
    pub point: ExtractionPoint,
}

impl Default for AiaSection {
    fn default() -> Self {
        Self { attribute: AttributeSetting::Rendered, strength: 0.1, attribute_classes: 2, pool: 4096, point: ExtractionPoint::Pooled }
    }
}

impl AiaSection {
    pub fn mode(&self) -> AttributeMode {
        match self.attribute {
            AttributeSetting::Independent => AttributeMode::Independent,
            AttributeSetting::Rendered => AttributeMode::Rendered { strength: self.strength },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefenseAttack {
    Gia,
    MiaNetwork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    /// Attack measured by `DefenseComponents`.
    pub attack: DefenseAttack,
    /// Toggle subsets for `DefenseComponents`; none, each alone and all
    /// three when unset.
    pub toggle_sets: Option<Vec<Vec<ComponentToggle>>>,
    pub sigmas: Vec<f32>,
    pub clip_norm: f32,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self { attack: DefenseAttack::Gia, toggle_sets: None, sigmas: vec![0.0, 0.1, 0.5, 1.0, 2.0], clip_norm: 1.0 }
    }
}

fn default_toggle_sets() -> Vec<Vec<ComponentToggle>> {
    use ComponentToggle::*;
    vec![vec![], vec![RestoreActivations], vec![ResNetStem], vec![UseBatchNorm], vec![RestoreActivations, ResNetStem, UseBatchNorm]]
}

/// `"All"` or tag names joined by `+`.
pub fn parse_selection(s: &str) -> Result<Selection> {
    if s == "All" {
        return Ok(Selection::All);
    }
    let tags = s
        .split('+')
        .map(|t| {
            ModuleTag::ALL.into_iter().find(|m| m.as_str() == t.trim()).ok_or_else(|| Error::config(format!("unknown module tag {t:?}")))
        })
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(Selection::Tags(tags))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// Identity of the experiment; seeds and the output directory are not part of it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.seeds.clear();
        crate::util::sha256_json(&c)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.data.side, self.data.side]
    }

    pub fn data_seed(&self, seed: u64) -> u64 {
        self.data.seed.unwrap_or(if self.preset.is_gia() { 0 } else { 11 }) + seed
    }

    pub fn data_noise(&self) -> f32 {
        let inversion = self.preset.is_gia() || (self.preset == Preset::DefenseComponents && self.defense.attack == DefenseAttack::Gia);
        self.data.noise.unwrap_or(if inversion { 0.05 } else { 0.15 })
    }

    fn scale(&self, spec: ArchSpec, divisor: usize) -> ArchSpec {
        if self.paper_scale {
            spec
        } else {
            spec.desk(self.model.width_divisor.unwrap_or(divisor))
        }
    }

    /// Ladder model at `step`, scaled for inversion.
    pub fn inversion_spec(&self, step: u8) -> Result<ArchSpec> {
        Ok(self.scale(spec_for_step(step, self.data.classes, self.input_shape())?, 4))
    }

    pub fn vit_spec(&self) -> ArchSpec {
        tiny_vit(self.model.vit, self.data.classes, self.input_shape())
    }

    /// Victim architecture of the training presets.
    pub fn victim_spec(&self) -> Result<ArchSpec> {
        match &self.model.architecture {
            Some(a) => Ok(a.clone()),
            None => Ok(self.scale(spec_for_step(self.base_step(), self.data.classes, self.input_shape())?, 16)),
        }
    }

    pub fn base_step(&self) -> u8 {
        self.model.step.unwrap_or(if self.preset == Preset::ActivationAblation { 9 } else { 12 })
    }

    /// Configured steps, or every step the input geometry supports (13 and
    /// 14 need 32x32 inputs).
    pub fn ladder_steps(&self) -> Vec<u8> {
        self.model.steps.clone().unwrap_or_else(|| {
            (1..=14).filter(|&k| self.inversion_spec(k).and_then(|s| param_layout(&s)).is_ok()).collect()
        })
    }

    pub fn selections(&self) -> Result<Vec<Selection>> {
        match &self.gia.selections {
            Some(s) => s.iter().map(|s| parse_selection(s)).collect(),
            None => ["All", "Stem", "Attention", "MLP", "Norm", "Head"].iter().map(|s| parse_selection(s)).collect(),
        }
    }

    pub fn toggle_sets(&self) -> Vec<Vec<ComponentToggle>> {
        self.defense.toggle_sets.clone().unwrap_or_else(default_toggle_sets)
    }

    pub fn gia_config(&self, seed: u64, selection: Selection) -> GiaConfig {
        let d = GiaConfig::default();
        let iterations = self.gia.iterations.unwrap_or(if self.paper_scale { d.iterations } else { DESK_GIA_ITERATIONS });
        GiaConfig {
            lr: self.gia.lr,
            tv_weight: self.gia.tv_weight,
            lr_decay: self.gia.lr_decay,
            capture_mode: self.gia.capture_mode,
            iterations,
            seed,
            selection,
            snapshots: self.gia.snapshots.iter().copied().filter(|&s| s <= iterations).collect(),
            ..d
        }
    }

    /// Training recipe of the victims and shadows. Desk scale trains the
    /// overfit preset: 30 epochs, batch 32, no mixing augmentation. DP
    /// sweeps never mix examples, since clipping is per example.
    pub fn recipe(&self) -> RecipeConfig {
        let kind = if self.preset == Preset::Aia { VictimKind::AttributeVictim } else { VictimKind::MembershipVictim };
        let mut r = default_recipe(kind);
        if !self.paper_scale {
            r.epochs = DESK_EPOCHS;
            r.batch_size = DESK_BATCH;
            r.mixup = None;
            r.cutmix = None;
        }
        let mut r = r.with(&self.recipe);
        if matches!(self.preset, Preset::DefenseDpsgd | Preset::DefenseDpsgdStem) {
            r.mixup = None;
            r.cutmix = None;
        }
        r
    }

    pub fn lira_pool(&self) -> usize {
        self.mia.pool.unwrap_or(256)
    }

    pub fn network_pool(&self) -> usize {
        self.mia.pool.unwrap_or(512)
    }

    /// Every check that can fail before training starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.data.side == 0 || self.data.classes < 2 {
            return Err(Error::config("data: side must be positive and classes at least 2"));
        }
        if self.model.width_divisor == Some(0) {
            return Err(Error::config("model: width_divisor must be positive"));
        }
        let check_spec = |s: &ArchSpec| -> Result<()> {
            s.validate()?;
            param_layout(s).map(|_| ())
        };
        let p = self.preset;
        match p {
            Preset::GiaLadder => {
                let steps = self.ladder_steps();
                if steps.is_empty() {
                    return Err(Error::config("model: steps must not be empty"));
                }
                for k in steps {
                    check_spec(&self.inversion_spec(k)?)?;
                }
            }
            Preset::GiaSegmentViT => {
                check_spec(&self.vit_spec())?;
                if self.selections()?.is_empty() {
                    return Err(Error::config("gia: selections must not be empty"));
                }
            }
            Preset::ActivationAblation | Preset::PatchifyLnAblation => check_spec(&self.inversion_spec(self.base_step())?)?,
            Preset::DefenseComponents => {
                let base = match self.defense.attack {
                    DefenseAttack::Gia => self.inversion_spec(self.base_step())?,
                    DefenseAttack::MiaNetwork => self.victim_spec()?,
                };
                for set in self.toggle_sets() {
                    check_spec(&apply_component_defense(&base, &set.into_iter().collect())?)?;
                }
            }
            _ => check_spec(&self.victim_spec()?)?,
        }
        if p.is_gia() || (p == Preset::DefenseComponents && self.defense.attack == DefenseAttack::Gia) {
            self.gia_config(0, Selection::All).validate()?;
        } else {
            self.recipe().validate()?;
        }
        match p {
            Preset::MiaLira | Preset::DefenseDpsgd | Preset::DefenseDpsgdStem => {
                if self.mia.shadows < 2 || self.mia.shadows % 2 != 0 {
                    return Err(Error::config("mia: shadows must be even and at least 2"));
                }
                if self.lira_pool() < 4 || self.mia.test_size == 0 || self.mia.victims == 0 {
                    return Err(Error::config("mia: pool must be at least 4, test_size and victims positive"));
                }
            }
            Preset::MiaNetwork if self.network_pool() < 8 => {
                return Err(Error::config("mia: the network attack needs a pool of at least 8"));
            }
            Preset::Aia => {
                if self.aia.attribute_classes < 2 || self.aia.pool < 8 || !self.aia.strength.is_finite() {
                    return Err(Error::config("aia: needs 2+ attribute classes, a pool of 8+ and a finite strength"));
                }
            }
            _ => {}
        }
        if matches!(p, Preset::DefenseDpsgd | Preset::DefenseDpsgdStem) {
            if self.defense.sigmas.is_empty() || self.defense.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return Err(Error::config("defense: sigmas must be a non-empty list of finite values >= 0"));
            }
            if !(self.defense.clip_norm > 0.0) || !self.defense.clip_norm.is_finite() {
                return Err(Error::config("defense: clip_norm must be positive"));
            }
            if self.victim_spec()?.norm == crate::arch::NormKind::BatchNorm {
                return Err(Error::config("defense: DP training needs a victim without batch norm"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(preset: &str) -> String {
        format!("schema_version = 1\npreset = \"{preset}\"\nseeds = [0]\n")
    }

    #[test]
    fn minimal_configs_validate() {
        for p in ["MiaNetwork", "MiaLira", "Aia", "GiaLadder", "GiaSegmentViT", "ActivationAblation", "PatchifyLnAblation", "DefenseComponents", "DefenseDpsgd", "DefenseDpsgdStem"] {
            let c = ExperimentConfig::from_toml(&minimal(p)).unwrap();
            assert_eq!(c.preset.as_str(), p);
            assert_eq!(Preset::parse(p), Some(c.preset));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml(&(minimal("Aia") + "colour = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("Aia") + "[gia]\nlrr = 1.0\n")).is_err());
    }

    #[test]
    fn invalid_values_fail_before_running() {
        assert!(ExperimentConfig::from_toml("schema_version = 1\npreset = \"Aia\"\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 2\npreset = \"Aia\"\nseeds = [0]\n").is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("GiaLadder") + "[model]\nsteps = [15]\n")).is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("MiaLira") + "[mia]\nshadows = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("DefenseDpsgd") + "[defense]\nsigmas = [-1.0]\n")).is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("DefenseDpsgd") + "[model]\nstep = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&(minimal("GiaSegmentViT") + "[gia]\nselections = [\"Stemm\"]\n")).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_and_seeds() {
        let a = ExperimentConfig::from_toml(&minimal("Aia")).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1, 2];
        assert_eq!(a.hash(), b.hash());
        b.aia.strength = 0.25;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::from_toml(&minimal("DefenseComponents")).unwrap();
        c.defense.toggle_sets = Some(vec![vec![ComponentToggle::ResNetStem]]);
        c.model.steps = Some(vec![1, 4]);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn desk_defaults() {
        let c = ExperimentConfig::from_toml(&minimal("MiaLira")).unwrap();
        let r = c.recipe();
        assert_eq!((r.epochs, r.batch_size, r.mixup), (DESK_EPOCHS, DESK_BATCH, None));
        assert_eq!(c.gia_config(0, Selection::All).iterations, DESK_GIA_ITERATIONS);
        let mut p = c.clone();
        p.paper_scale = true;
        assert_eq!(p.recipe().epochs, 300);
        assert_eq!(p.victim_spec().unwrap().stage_depths, [3, 3, 9, 3]);
    }

    #[test]
    fn default_ladder_fits_the_input() {
        let c = ExperimentConfig::from_toml(&minimal("GiaLadder")).unwrap();
        assert_eq!(c.ladder_steps(), (1..=12).collect::<Vec<u8>>());
        let big = ExperimentConfig::from_toml(&(minimal("GiaLadder") + "[data]\nside = 32\n")).unwrap();
        assert_eq!(big.ladder_steps().len(), 14);
    }
}
