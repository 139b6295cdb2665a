//! Batch-means error estimation and the estimator report record.

use serde::Serialize;

/// Minimum batch count behind every reported standard error.
pub const MIN_BATCHES: usize = 20;

/// A Monte Carlo estimate with its standard error and provenance.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EstimatorReport {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Diagnostics {
    /// Acceptance rate per move kind, in the order of [`crate::gibbs::MoveKind::ALL`].
    pub acceptance: Vec<f64>,
    /// Integrated autocorrelation time estimated from the batch variance.
    pub tau_int: f64,
    pub batches: usize,
}

impl EstimatorReport {
    pub fn exact(value: f64, seed: u64) -> Self {
        Self { value, std_error: 0.0, n_samples: 0, seed, diagnostics: Diagnostics::default() }
    }

    /// `|value - target|` in units of the standard error (infinite when the
    /// error is zero and the values differ).
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_error
        }
    }
}

/// Batch means summary of several independent chains' series.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub batches: usize,
    pub tau_int: f64,
}

/// Splits each chain into equal batches (dropping any remainder at the
/// front), pools the batch means and reports their standard error.
/// Each chain contributes `ceil(MIN_BATCHES / chains)` batches so the pooled
/// count is at least [`MIN_BATCHES`].
pub fn batch_means(chains: &[Vec<f64>]) -> BatchStats {
    let per_chain = MIN_BATCHES.div_ceil(chains.len().max(1));
    let mut means = Vec::new();
    let mut total = 0usize;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut batch_len_acc = 0usize;
    for series in chains {
        let b = series.len() / per_chain;
        if b == 0 {
            continue;
        }
        let start = series.len() - b * per_chain;
        for chunk in series[start..].chunks_exact(b) {
            means.push(chunk.iter().sum::<f64>() / b as f64);
            batch_len_acc = b;
        }
        for v in &series[start..] {
            total += 1;
            sum += v;
            sumsq += v * v;
        }
    }
    if means.len() < 2 {
        return BatchStats { mean: f64::NAN, std_error: f64::INFINITY, n: total, batches: means.len(), tau_int: f64::NAN };
    }
    let nb = means.len() as f64;
    let mean = means.iter().sum::<f64>() / nb;
    let var_b = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (nb - 1.0);
    let std_error = (var_b / nb).sqrt();
    let var = (sumsq / total as f64 - (sum / total as f64).powi(2)).max(0.0);
    let tau_int = if var > 0.0 { batch_len_acc as f64 * var_b / (2.0 * var) } else { 0.0 };
    BatchStats { mean, std_error, n: total, batches: means.len(), tau_int }
}

/// Mean and standard error of independent draws.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

/// Pearson χ² statistic and its upper-tail p-value for observed counts
/// against expected probabilities. Bins with expectation below 5 are pooled
/// into their neighbour.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> (f64, f64, usize) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = observed.iter().sum();
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(probs) {
        o_acc += *o as f64;
        e_acc += p * n as f64;
        if e_acc >= 5.0 {
            pooled.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => pooled.push((o_acc, e_acc)),
        }
    }
    let stat: f64 = pooled.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = pooled.len().saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    (stat, p, dof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iid_batch_error_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..10_000).map(|_| rng.random::<f64>()).collect()).collect();
        let s = batch_means(&chains);
        assert!(s.batches >= MIN_BATCHES);
        let naive = (1.0f64 / 12.0 / 40_000.0).sqrt();
        assert!((s.std_error / naive - 1.0).abs() < 0.5);
        assert!((s.mean - 0.5).abs() < 4.0 * naive);
    }

    #[test]
    fn chi_square_uniform() {
        let (stat, p, dof) = chi_square(&[100, 100, 100, 100], &[0.25; 4]);
        assert_eq!(stat, 0.0);
        assert_eq!(dof, 3);
        assert!((p - 1.0).abs() < 1e-12);
    }
}
