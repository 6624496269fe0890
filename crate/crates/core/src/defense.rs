//! Defenses: reverting leaky micro designs, and DP-SGD aggregation with
//! optional restriction to a subset of module tags.

use std::collections::BTreeSet;

use archleak_grad::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Family, ModuleTag, NormKind, Selection, StemSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentToggle {
    RestoreActivations,
    ResNetStem,
    UseBatchNorm,
}

/// Revert the selected micro designs of a ladder spec.
pub fn apply_component_defense(spec: &ArchSpec, toggles: &BTreeSet<ComponentToggle>) -> Result<ArchSpec> {
    let mut out = spec.clone();
    for &t in toggles {
        if spec.family != Family::MorphLadder {
            return Err(Error::domain(format!("{t:?} applies only to ladder models")));
        }
        match t {
            ComponentToggle::RestoreActivations => out.activation_mask = [true; 3],
            ComponentToggle::ResNetStem => out.stem = StemSpec { kernel: 7, stride: 2, maxpool: true },
            ComponentToggle::UseBatchNorm => {
                out.norm = NormKind::BatchNorm;
                out.conv_bias = false;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f32,
    pub noise_multiplier: f32,
    pub target_tags: Selection,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::domain(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::domain(format!(
                "noise multiplier must be non-negative, got {}",
                self.noise_multiplier
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DpOutput {
    /// One tensor per parameter.
    pub gradient: Vec<Tensor>,
    /// Norm of each example's targeted sub-vector after clipping.
    pub clipped_norms: Vec<f64>,
}

fn norm_of(parts: &[&[f32]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Clip each example's targeted gradients to `clip_norm`, average, and add
/// `N(0, (sigma * C / batch)^2)` per targeted coordinate. Untargeted
/// parameters get the plain average.
///
/// `per_example[e][p]` is the gradient of parameter `p` for example `e`.
pub fn dp_step(
    per_example: &[Vec<Tensor>],
    tags: &[ModuleTag],
    cfg: &DpConfig,
    rng: &mut impl Rng,
) -> Result<DpOutput> {
    cfg.validate()?;
    let batch = per_example.len();
    if batch == 0 {
        return Err(Error::domain("dp_step needs at least one example"));
    }
    let targeted: Vec<bool> = tags.iter().map(|&t| cfg.target_tags.contains(t)).collect();
    for ex in per_example {
        if ex.len() != tags.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", ex.len(), tags.len())));
        }
        if ex.iter().any(|t| !t.all_finite()) {
            return Err(Error::domain("per-example gradient is not finite"));
        }
    }
    let c = cfg.clip_norm as f64;
    let mut sums: Vec<Vec<f32>> = per_example[0].iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut clipped_norms = Vec::with_capacity(batch);
    for ex in per_example {
        let parts: Vec<&[f32]> = ex.iter().zip(&targeted).filter(|(_, &t)| t).map(|(g, _)| g.data()).collect();
        let norm = norm_of(&parts);
        let mut scaled: Option<Vec<Vec<f32>>> = None;
        let mut final_norm = norm;
        if norm > c {
            let mut factor = c / norm;
            loop {
                let s: Vec<Vec<f32>> = parts.iter().map(|p| p.iter().map(|&v| (v as f64 * factor) as f32).collect()).collect();
                let refs: Vec<&[f32]> = s.iter().map(Vec::as_slice).collect();
                final_norm = norm_of(&refs);
                if final_norm <= c {
                    scaled = Some(s);
                    break;
                }
                factor *= 1.0 - f64::EPSILON.sqrt();
            }
        }
        clipped_norms.push(final_norm);
        let mut k = 0;
        for (p, g) in ex.iter().enumerate() {
            let src: &[f32] = match (&scaled, targeted[p]) {
                (Some(s), true) => {
                    k += 1;
                    &s[k - 1]
                }
                _ => g.data(),
            };
            for (acc, &v) in sums[p].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let std = cfg.noise_multiplier as f64 * c / batch as f64;
    let noise = Normal::new(0.0, std).map_err(|e| Error::domain(e.to_string()))?;
    let b = batch as f32;
    let gradient = sums
        .into_iter()
        .enumerate()
        .map(|(p, s)| {
            let mut v: Vec<f32> = s.into_iter().map(|x| x / b).collect();
            if targeted[p] && std > 0.0 {
                for x in &mut v {
                    *x += noise.sample(rng) as f32;
                }
            }
            Tensor::new(per_example[0][p].shape().to_vec(), v)
        })
        .collect();
    Ok(DpOutput { gradient, clipped_norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec_for_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: f32, s: f32) -> DpConfig {
        DpConfig { clip_norm: c, noise_multiplier: s, target_tags: Selection::All, seed: 0 }
    }

    #[test]
    fn identity_without_noise_or_clipping() {
        let g = vec![
            vec![Tensor::new(vec![2], vec![0.1, -0.2])],
            vec![Tensor::new(vec![2], vec![0.3, 0.05])],
        ];
        let out = dp_step(&g, &[ModuleTag::Stem], &cfg(10.0, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.gradient[0].data(), &[(0.1f32 + 0.3) / 2.0, (-0.2f32 + 0.05) / 2.0]);
    }

    #[test]
    fn clips_to_exact_norm() {
        let g = vec![vec![Tensor::new(vec![2], vec![1.2, 1.6])]];
        let out = dp_step(&g, &[ModuleTag::Stem], &cfg(1.0, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.clipped_norms[0] <= 1.0 && out.clipped_norms[0] > 1.0 - 1e-6);
    }

    #[test]
    fn bad_config_is_a_domain_error() {
        let g = vec![vec![Tensor::zeros(&[1])]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(dp_step(&g, &[ModuleTag::Stem], &cfg(0.0, 1.0), &mut rng), Err(Error::Domain(_))));
        assert!(matches!(dp_step(&g, &[ModuleTag::Stem], &cfg(1.0, -1.0), &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_norm_toggle_is_field_local() {
        let s12 = spec_for_step(12, 10, [3, 32, 32]).unwrap();
        let s11 = spec_for_step(11, 10, [3, 32, 32]).unwrap();
        let d = apply_component_defense(&s12, &[ComponentToggle::UseBatchNorm].into()).unwrap();
        assert_eq!(d.diff(&s12), vec!["conv_bias".to_string(), "norm".to_string()]);
        assert_eq!(d.conv_bias, s11.conv_bias);
        assert_eq!(apply_component_defense(&s12, &BTreeSet::new()).unwrap(), s12);
    }

    #[test]
    fn toggles_reject_vit() {
        let vit = crate::arch::tiny_vit(
            crate::arch::VitSpec { patch: 4, dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0 },
            10,
            [3, 16, 16],
        );
        let err = apply_component_defense(&vit, &[ComponentToggle::ResNetStem].into()).unwrap_err();
        assert!(err.to_string().contains("ResNetStem"));
    }
}
