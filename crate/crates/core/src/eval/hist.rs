//! Member / non-member loss histograms on shared bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedHistogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub member: Vec<usize>,
    pub nonmember: Vec<usize>,
}

pub fn loss_histogram(member: &[f64], nonmember: &[f64], bins: usize) -> Result<PairedHistogram> {
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    let all = member.iter().chain(nonmember);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |values: &[f64]| {
        let mut c = vec![0usize; bins];
        for &v in values {
            let i = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1);
            c[i as usize] += 1;
        }
        c
    };
    Ok(PairedHistogram { edges, member: count(member), nonmember: count(nonmember) })
}

impl PairedHistogram {
    /// Number of bins populated by both groups.
    pub fn overlapping_bins(&self) -> usize {
        self.member.iter().zip(&self.nonmember).filter(|(a, b)| **a > 0 && **b > 0).count()
    }

    /// Rows `(left edge, right edge, member, nonmember)` for CSV export.
    pub fn rows(&self) -> Vec<(f64, f64, usize, usize)> {
        (0..self.member.len())
            .map(|i| (self.edges[i], self.edges[i + 1], self.member[i], self.nonmember[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_populations() {
        let v = [0.1, 0.5, 0.5, 2.0];
        let h = loss_histogram(&v, &v, 4).unwrap();
        assert_eq!(h.member, h.nonmember);
        assert_eq!(h.member.iter().sum::<usize>(), 4);
    }

    #[test]
    fn disjoint_supports() {
        let h = loss_histogram(&[0.0, 0.1, 0.2], &[0.9, 1.0], 5).unwrap();
        assert_eq!(h.overlapping_bins(), 0);
        assert_eq!(h.member.iter().sum::<usize>(), 3);
        assert_eq!(h.nonmember.iter().sum::<usize>(), 2);
    }

    #[test]
    fn zero_bins_rejected() {
        assert!(loss_histogram(&[1.0], &[2.0], 0).is_err());
    }
}
