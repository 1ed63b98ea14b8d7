//! Paired bootstrap comparison of two classifiers on the same test set.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Accuracy of `a` minus accuracy of `b`.
    pub observed: f64,
    pub samples: usize,
    pub resamples: usize,
    pub p_value: f64,
    pub seed: u64,
}

/// Resamples test indices with replacement `resamples` times and counts the
/// resamples whose mean correctness difference is zero or of the opposite
/// sign to the observed one. The two-sided p-value is twice that fraction,
/// capped at 1; with no observed difference it is 1.
pub fn bootstrap_compare(
    correct_a: &[bool],
    correct_b: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::data(format!(
            "correctness vectors differ in length: {} vs {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let n = correct_a.len();
    if n == 0 {
        return Err(Error::data("correctness vectors are empty"));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::config(format!(
            "need at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let diff: Vec<i64> = correct_a
        .iter()
        .zip(correct_b)
        .map(|(&a, &b)| a as i64 - b as i64)
        .collect();
    let observed_sum: i64 = diff.iter().sum();
    let sign = observed_sum.signum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut against = 0usize;
    for _ in 0..resamples {
        let s: i64 = (0..n).map(|_| diff[rng.random_range(0..n)]).sum();
        if sign == 0 || s.signum() != sign {
            against += 1;
        }
    }
    Ok(BootstrapResult {
        observed: observed_sum as f64 / n as f64,
        samples: n,
        resamples,
        p_value: (2.0 * against as f64 / resamples as f64).min(1.0),
        seed,
    })
}

impl fmt::Display for BootstrapResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy difference {:+.4} over {} samples, B = {}, seed {}: ",
            self.observed, self.samples, self.resamples, self.seed
        )?;
        if self.p_value == 0.0 {
            write!(f, "p < {}", 1.0 / self.resamples as f64)
        } else {
            write!(f, "p = {:.4}", self.p_value)
        }
    }
}
