//! Attribute inference from the victim's internal representation.

use std::io::Write;

use archleak_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::arch::{Mode, TaggedModel};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_f1};
use crate::mlp::{Mlp, MlpConfig};
use crate::train::{Dataset, EVAL_BATCH};

/// Hidden width of the attribute attacker.
pub const ATTACKER_HIDDEN: usize = 64;

/// Where the representation is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionPoint {
    /// Globally pooled activations right before the classifier.
    #[default]
    Pooled,
    /// Flattened spatial map before pooling (ladder models).
    FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationPair {
    pub h: Vec<f32>,
    pub a: usize,
}

/// Eval-mode representation of a batch, one row per example.
pub fn extract_representation(model: &TaggedModel, x: &Tensor, point: ExtractionPoint) -> Result<Tensor> {
    let t = match point {
        ExtractionPoint::Pooled => model.infer(x)?.1,
        ExtractionPoint::FeatureMap => {
            let g = Graph::inference();
            let params: Vec<Var> = model.params.iter().map(|t| g.constant(t.clone())).collect();
            model.feature_map(&g, &params, &g.constant(x.clone()), Mode::Eval)?.value()
        }
    };
    let b = t.shape()[0];
    let d = t.numel() / b.max(1);
    Ok(Tensor::new(vec![b, d], t.into_vec()))
}

/// `(h, a)` for every example of an attribute-carrying dataset.
pub fn extract_pairs(model: &TaggedModel, data: &Dataset, point: ExtractionPoint) -> Result<Vec<RepresentationPair>> {
    let attrs = data.attributes.as_ref().ok_or_else(|| Error::config("dataset carries no hidden attribute"))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let h = extract_representation(model, &data.batch(chunk), point)?;
        let d = h.shape()[1];
        for (row, &i) in h.data().chunks(d).zip(chunk) {
            out.push(RepresentationPair { h: row.to_vec(), a: attrs[i] });
        }
    }
    Ok(out)
}

fn stack(pairs: &[RepresentationPair]) -> Result<(Tensor, Vec<usize>)> {
    let d = pairs.first().map_or(0, |p| p.h.len());
    if pairs.iter().any(|p| p.h.len() != d) {
        return Err(Error::shape("representations have mixed widths"));
    }
    let x = Tensor::new(vec![pairs.len(), d], pairs.iter().flat_map(|p| p.h.iter().copied()).collect());
    Ok((x, pairs.iter().map(|p| p.a).collect()))
}

#[derive(Debug, Clone)]
pub struct AttributeAttacker {
    pub model: Mlp,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AiaEval {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Accuracy and macro-F1 of uniform guessing, `1 / classes`.
    pub baseline: f64,
}

/// Fit the two-layer attacker on auxiliary pairs.
pub fn train_attribute_attacker(pairs: &[RepresentationPair], classes: usize, seed: u64) -> Result<AttributeAttacker> {
    train_attribute_attacker_with(pairs, classes, &MlpConfig::new(&[ATTACKER_HIDDEN], seed))
}

pub fn train_attribute_attacker_with(pairs: &[RepresentationPair], classes: usize, cfg: &MlpConfig) -> Result<AttributeAttacker> {
    let (x, a) = stack(pairs)?;
    let mut present = a.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::domain("auxiliary set holds a single attribute class"));
    }
    Ok(AttributeAttacker { model: Mlp::fit(&x, &a, classes, cfg)?, classes })
}

impl AttributeAttacker {
    pub fn predict(&self, pairs: &[RepresentationPair]) -> Result<Vec<usize>> {
        self.model.predict(&stack(pairs)?.0)
    }

    pub fn evaluate(&self, pairs: &[RepresentationPair]) -> Result<AiaEval> {
        let (x, a) = stack(pairs)?;
        let p = self.model.predict(&x)?;
        Ok(AiaEval {
            accuracy: accuracy(&p, &a)?,
            macro_f1: macro_f1(&p, &a, self.classes)?.value,
            baseline: 1.0 / self.classes as f64,
        })
    }
}

/// Write pairs as CSV: `a,h0,h1,...`, preceded by a comment line naming
/// the attribute alphabet.
pub fn write_pairs_csv(w: impl Write, pairs: &[RepresentationPair], alphabet: &[String]) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "# alphabet: {}", alphabet.join(" ")).map_err(|e| Error::io("pairs csv", e))?;
    let mut c = csv::Writer::from_writer(w);
    let d = pairs.first().map_or(0, |p| p.h.len());
    let mut header = vec!["a".to_string()];
    header.extend((0..d).map(|i| format!("h{i}")));
    c.write_record(&header)?;
    for p in pairs {
        let name = alphabet.get(p.a).cloned().unwrap_or_else(|| p.a.to_string());
        let mut row = vec![name];
        row.extend(p.h.iter().map(|v| v.to_string()));
        c.write_record(&row)?;
    }
    c.flush().map_err(|e| Error::io("pairs csv", e))?;
    Ok(())
}
