//! Normalized next-token distributions in natural-log space.

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Tolerance on `logsumexp(log_probs)` for a validated distribution.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` when every entry is
/// `-inf` (or the slice is empty).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A log-probability vector over the whole vocabulary, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    log_probs: Vec<f64>,
}

impl Distribution {
    /// Accepts `log_probs` only if it is already normalized to within
    /// [`NORM_TOLERANCE`].
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        check_entries(&log_probs)?;
        let z = logsumexp(&log_probs);
        if z.abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "logsumexp is {z}, expected 0"
            )));
        }
        Ok(Distribution { log_probs })
    }

    /// Shifts `log_probs` so that they sum to one.
    pub fn normalize_log(mut log_probs: Vec<f64>) -> Result<Self> {
        check_entries(&log_probs)?;
        let z = logsumexp(&log_probs);
        for x in &mut log_probs {
            *x -= z;
        }
        Ok(Distribution { log_probs })
    }

    /// From non-negative weights; they need not sum to one.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("all weights are zero".into()));
        }
        Distribution::normalize_log(weights.iter().map(|w| (w / total).ln()).collect())
    }

    pub fn uniform(size: usize) -> Self {
        let lp = -(size as f64).ln();
        Distribution {
            log_probs: vec![lp; size],
        }
    }

    pub fn one_hot(size: usize, id: TokenId) -> Self {
        let mut log_probs = vec![f64::NEG_INFINITY; size];
        log_probs[id as usize] = 0.0;
        Distribution { log_probs }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.log_probs[id as usize]
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.log_probs[id as usize].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|x| x.exp()).collect()
    }

    /// Highest-probability id, ties to the smaller id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &x) in self.log_probs.iter().enumerate() {
            if x > self.log_probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

fn check_entries(log_probs: &[f64]) -> Result<()> {
    if log_probs.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(x) = log_probs
        .iter()
        .find(|x| x.is_nan() || **x == f64::INFINITY)
    {
        return Err(Error::InvalidDistribution(format!("entry {x} is not allowed")));
    }
    if log_probs.iter().all(|&x| x == f64::NEG_INFINITY) {
        return Err(Error::InvalidDistribution("no entry has positive mass".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_basics() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert!((logsumexp(&[0.5f64.ln(), 0.5f64.ln()])).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(Distribution::from_log_probs(vec![0.0, 0.0]).is_err());
        assert!(Distribution::from_log_probs(vec![f64::NAN]).is_err());
        assert!(Distribution::from_log_probs(vec![f64::NEG_INFINITY; 3]).is_err());
        assert!(Distribution::normalize_log(vec![f64::INFINITY, 0.0]).is_err());
        assert!(Distribution::from_weights(&[0.0, 0.0]).is_err());
        assert!(Distribution::from_weights(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn normalizes() {
        let d = Distribution::normalize_log(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(logsumexp(d.log_probs()).abs() < NORM_TOLERANCE);
        assert!((d.prob(2) - 0.25).abs() < 1e-15);
        let w = Distribution::from_weights(&[2.0, 0.0, 6.0]).unwrap();
        assert_eq!(w.log_prob(1), f64::NEG_INFINITY);
        assert!((w.prob(2) - 0.75).abs() < 1e-15);
        assert_eq!(w.argmax(), 2);
    }

    #[test]
    fn argmax_tie_prefers_smaller_id() {
        assert_eq!(Distribution::uniform(4).argmax(), 0);
    }
}
