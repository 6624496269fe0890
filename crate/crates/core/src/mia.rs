//! Membership inference: the shadow-model network attack and LiRA.

use archleak_grad::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::TaggedModel;
use crate::error::{Error, Result};
use crate::eval::{accuracy, roc};
use crate::exec;
use crate::mlp::{Mlp, MlpConfig};
use crate::train::{predict_logits, Dataset};

/// Hidden widths of the network attack model.
pub const ATTACK_HIDDEN: [usize; 2] = [64, 64];
/// Clamp applied to confidences before the scaled logit.
pub const PROB_EPS: f64 = 1e-8;
/// Lower bound on fitted variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One victim query: softmax posteriors and whether the argmax is right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackFeature {
    pub posteriors: Vec<f32>,
    pub correct: bool,
}

impl AttackFeature {
    /// Posteriors followed by the correctness bit.
    pub fn vector(&self) -> Vec<f32> {
        let mut v = self.posteriors.clone();
        v.push(self.correct as u8 as f32);
        v
    }
}

fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Features from logits `[n, k]` and labels.
pub fn features_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Vec<AttackFeature>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("logits {s:?} for {} labels", labels.len())));
    }
    Ok(logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .map(|(row, &y)| {
            let p = softmax_row(row);
            let arg = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            AttackFeature { posteriors: p.iter().map(|&v| v as f32).collect(), correct: arg == y }
        })
        .collect())
}

/// Query `model` on every example of `data`.
pub fn collect_features(model: &TaggedModel, data: &Dataset) -> Result<Vec<AttackFeature>> {
    features_from_logits(&predict_logits(model, data)?, &data.labels)
}

fn stack(features: &[&AttackFeature]) -> Tensor {
    let d = features.first().map_or(0, |f| f.posteriors.len() + 1);
    Tensor::new(vec![features.len(), d], features.iter().flat_map(|f| f.vector()).collect())
}

/// Trained member/non-member classifier.
#[derive(Debug, Clone)]
pub struct NetworkAttack {
    pub model: Mlp,
    /// Set when one class outnumbers the other more than 100:1.
    pub warning: Option<String>,
}

/// Fit the attack MLP on shadow features; members are class 1.
pub fn train_attack_mlp(member: &[AttackFeature], nonmember: &[AttackFeature], seed: u64) -> Result<NetworkAttack> {
    train_attack_mlp_with(member, nonmember, &MlpConfig::new(&ATTACK_HIDDEN, seed))
}

pub fn train_attack_mlp_with(member: &[AttackFeature], nonmember: &[AttackFeature], cfg: &MlpConfig) -> Result<NetworkAttack> {
    if member.is_empty() || nonmember.is_empty() {
        return Err(Error::domain("attack training needs both members and non-members"));
    }
    let (a, b) = (member.len().max(nonmember.len()), member.len().min(nonmember.len()));
    let warning = (a > 100 * b).then(|| format!("class imbalance {}:{}", member.len(), nonmember.len()));
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    let rows: Vec<&AttackFeature> = member.iter().chain(nonmember).collect();
    let width = rows[0].posteriors.len();
    if rows.iter().any(|f| f.posteriors.len() != width) {
        return Err(Error::shape("attack features have mixed widths"));
    }
    let labels: Vec<usize> = (0..rows.len()).map(|i| (i < member.len()) as usize).collect();
    Ok(NetworkAttack { model: Mlp::fit(&stack(&rows), &labels, 2, cfg)?, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    pub accuracy: f64,
    pub auc: f64,
}

impl NetworkAttack {
    /// Member probability of each query, members first, with the truth.
    pub fn scores(&self, member: &[AttackFeature], nonmember: &[AttackFeature]) -> Result<(Vec<f64>, Vec<bool>)> {
        let rows: Vec<&AttackFeature> = member.iter().chain(nonmember).collect();
        let truth = (0..rows.len()).map(|i| i < member.len()).collect();
        Ok((self.model.positive_score(&stack(&rows))?, truth))
    }

    /// Accuracy and AUC on labelled victim queries.
    pub fn evaluate(&self, member: &[AttackFeature], nonmember: &[AttackFeature]) -> Result<AttackEval> {
        let (scores, truth) = self.scores(member, nonmember)?;
        let preds: Vec<usize> = scores.iter().map(|&s| (s > 0.5) as usize).collect();
        let labels: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
        Ok(AttackEval { accuracy: accuracy(&preds, &labels)?, auc: roc(&scores, &truth)?.auc })
    }
}

/// `log(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn scaled_logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p.ln() - (1.0 - p).ln()
}

/// Scaled logit of the true-class confidence for every example.
pub fn lira_statistic(model: &TaggedModel, data: &Dataset) -> Result<Vec<f64>> {
    let logits = predict_logits(model, data)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).zip(&data.labels).map(|(row, &y)| scaled_logit(softmax_row(row)[y])).collect())
}

/// `n` shadows by `m` examples; every column holds exactly `n / 2` trues.
pub fn lira_mask(n: usize, m: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::domain(format!("LiRA needs an even number of shadows, at least 2; got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![vec![false; m]; n];
    let mut col: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    for j in 0..m {
        col.shuffle(&mut rng);
        for i in 0..n {
            mask[i][j] = col[i];
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct ShadowEnsemble {
    pub models: Vec<TaggedModel>,
    /// `membership_mask[n][m]`: shadow `n` trained on pool example `m`.
    pub membership_mask: Vec<Vec<bool>>,
    /// Shadow statistics, `[n][m]`.
    pub statistics: Vec<Vec<f64>>,
}

/// Train `n` shadows on mask-selected halves of `pool`. `train` receives
/// the shadow index and its training subset.
pub fn lira_build<F>(pool: &Dataset, n: usize, seed: u64, train: F) -> Result<ShadowEnsemble>
where
    F: Fn(usize, &Dataset) -> Result<TaggedModel> + Sync + Send,
{
    let mask = lira_mask(n, pool.len(), seed)?;
    let models = exec::try_map_indexed(n, |i| {
        let idx: Vec<usize> = (0..pool.len()).filter(|&j| mask[i][j]).collect();
        train(i, &pool.subset(&idx))
    })?;
    let statistics = models.iter().map(|m| lira_statistic(m, pool)).collect::<Result<Vec<_>>>()?;
    Ok(ShadowEnsemble { models, membership_mask: mask, statistics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiraScore {
    pub example: usize,
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
    /// Natural log of the likelihood ratio; the ratio itself overflows.
    pub log_lratio: f64,
    pub decision_score: f64,
    /// A side had fewer than two shadows and used the pooled fit.
    pub global_variance: bool,
}

impl LiraScore {
    pub fn lratio(&self) -> f64 {
        self.log_lratio.exp()
    }
}

fn fit(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.max(VARIANCE_FLOOR).sqrt())
}

fn log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Score from explicit Gaussian fits.
pub fn lira_decision(phi: f64, mu_in: f64, sigma_in: f64, mu_out: f64, sigma_out: f64) -> (f64, f64) {
    let l = log_pdf(phi, mu_in, sigma_in) - log_pdf(phi, mu_out, sigma_out);
    (l, 1.0 / (1.0 + (-l).exp()))
}

/// Score every pool example given the victim's statistics.
pub fn lira_score_all(ensemble: &ShadowEnsemble, victim_phi: &[f64]) -> Result<Vec<LiraScore>> {
    let n = ensemble.statistics.len();
    let m = victim_phi.len();
    if n == 0 || ensemble.statistics.iter().any(|s| s.len() != m) {
        return Err(Error::shape(format!("victim has {m} statistics, shadows disagree")));
    }
    let split = |side: bool| -> Vec<f64> {
        (0..n).flat_map(|i| (0..m).filter(move |&j| ensemble.membership_mask[i][j] == side).map(move |j| (i, j))).map(|(i, j)| ensemble.statistics[i][j]).collect()
    };
    let (global_in, global_out) = (split(true), split(false));
    if global_in.is_empty() || global_out.is_empty() {
        return Err(Error::domain("ensemble has no IN or no OUT observations"));
    }
    let (g_in, g_out) = (fit(&global_in), fit(&global_out));
    Ok((0..m)
        .map(|j| {
            let ins: Vec<f64> = (0..n).filter(|&i| ensemble.membership_mask[i][j]).map(|i| ensemble.statistics[i][j]).collect();
            let outs: Vec<f64> = (0..n).filter(|&i| !ensemble.membership_mask[i][j]).map(|i| ensemble.statistics[i][j]).collect();
            let mut flagged = false;
            let mut side = |v: &[f64], g: (f64, f64)| {
                if v.len() < 2 {
                    flagged = true;
                    let mu = if v.is_empty() { g.0 } else { v[0] };
                    (mu, g.1)
                } else {
                    fit(v)
                }
            };
            let (mu_in, sigma_in) = side(&ins, g_in);
            let (mu_out, sigma_out) = side(&outs, g_out);
            let (log_lratio, decision_score) = lira_decision(victim_phi[j], mu_in, sigma_in, mu_out, sigma_out);
            LiraScore { example: j, mu_in, sigma_in, mu_out, sigma_out, log_lratio, decision_score, global_variance: flagged }
        })
        .collect())
}

/// Score one pool example against `victim`.
pub fn lira_score(ensemble: &ShadowEnsemble, victim: &TaggedModel, pool: &Dataset, example: usize) -> Result<LiraScore> {
    if example >= pool.len() {
        return Err(Error::domain(format!("example {example} outside a pool of {}", pool.len())));
    }
    let phi = lira_statistic(victim, pool)?;
    Ok(lira_score_all(ensemble, &phi)?.swap_remove(example))
}

/// AUC of LiRA scores against true membership.
pub fn lira_auc(scores: &[LiraScore], members: &[bool]) -> Result<f64> {
    let s: Vec<f64> = scores.iter().map(|s| s.log_lratio).collect();
    Ok(roc(&s, members)?.auc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_form() {
        let l = Tensor::new(vec![2, 4], vec![0.0; 4].into_iter().chain([2f32.ln(), 0.0, 0.0, 0.0]).collect());
        let f = features_from_logits(&l, &[0, 0]).unwrap();
        assert!(f[0].posteriors.iter().all(|&p| (p - 0.25).abs() < 1e-6));
        assert!((f[1].posteriors[0] - 0.4).abs() < 1e-6);
        assert!((f[1].posteriors[1] - 0.2).abs() < 1e-6);
        assert!(f[1].correct);
        assert_eq!(f[0].vector().len(), 5);
    }

    #[test]
    fn mask_parity() {
        let m = lira_mask(2, 4, 0).unwrap();
        for j in 0..4 {
            assert!(m[0][j] != m[1][j]);
        }
        let m = lira_mask(16, 50, 3).unwrap();
        for j in 0..50 {
            assert_eq!((0..16).filter(|&i| m[i][j]).count(), 8);
        }
        assert_eq!(m, lira_mask(16, 50, 3).unwrap());
        assert!(matches!(lira_mask(3, 4, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_fits_give_half() {
        let (l, d) = lira_decision(0.3, 1.0, 2.0, 1.0, 2.0);
        assert_eq!(l, 0.0);
        assert_eq!(d, 0.5);
        let (_, d) = lira_decision(5.0, 5.0, 1.0, -5.0, 1.0);
        assert!(d > 0.99);
    }

    #[test]
    fn clamp_keeps_logit_finite() {
        assert!(scaled_logit(0.0).is_finite());
        assert!(scaled_logit(1.0).is_finite());
        assert!((scaled_logit(0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_shadow_side_falls_back() {
        let e = ShadowEnsemble {
            models: Vec::new(),
            membership_mask: vec![vec![true, false], vec![false, true]],
            statistics: vec![vec![1.0, -1.0], vec![-2.0, 2.0]],
        };
        let s = lira_score_all(&e, &[0.0, 0.0]).unwrap();
        assert!(s.iter().all(|s| s.global_variance));
    }
}
