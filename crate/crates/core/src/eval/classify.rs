//! Accuracy and macro-F1 for attack predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    pub per_class: Vec<f64>,
    /// Classes that never occur in `labels`; they count as F1 = 0.
    pub absent: Vec<usize>,
}

/// Unweighted mean of per-class F1 over classes `0..num_classes`.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MacroF1> {
    check(predictions, labels)?;
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::domain(format!("class {bad} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnc = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fnc[l] += 1;
        }
    }
    let mut absent = Vec::new();
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            if tp[c] + fnc[c] == 0 {
                absent.push(c);
                return 0.0;
            }
            let denom = 2 * tp[c] + fp[c] + fnc[c];
            2.0 * tp[c] as f64 / denom as f64
        })
        .collect();
    let value = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(MacroF1 { value, per_class, absent })
}

fn check(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::domain("metrics need at least one example"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let l = [0, 1, 2, 1];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(macro_f1(&l, &l, 3).unwrap().value, 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_binary() {
        let labels = [0, 1, 0, 1];
        let preds = [1, 1, 1, 1];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.5);
        let f = macro_f1(&preds, &labels, 2).unwrap();
        assert!((f.value - 1.0 / 3.0).abs() < 1e-12);
        assert!(f.absent.is_empty());
    }

    #[test]
    fn absent_class_is_flagged() {
        let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(f.absent, vec![2]);
        assert!((f.value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn order_invariance() {
        let labels = [0, 1, 2, 2, 1, 0, 1];
        let preds = [0, 2, 2, 1, 1, 0, 0];
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        assert_eq!(accuracy(&preds, &labels).unwrap(), accuracy(&pp, &pl).unwrap());
        assert_eq!(
            macro_f1(&preds, &labels, 3).unwrap().value,
            macro_f1(&pp, &pl, 3).unwrap().value
        );
    }
}
