//! Paired one-sided comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// One-sided paired t-test of `H1: E[d] > 0` over differences `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_greater(diffs: &[f64]) -> PairedTest {
    let n = diffs.len();
    let (mean, stderr) = cost_core::probe::mean_stderr(diffs);
    if n < 2 || stderr == 0.0 || !stderr.is_finite() {
        // Degenerate spread: the sign of the mean decides outright.
        let p_value = if n > 0 && mean > 0.0 { 0.0 } else { 1.0 };
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return PairedTest { mean, stderr, n, t: if n == 0 { 0.0 } else { t }, p_value };
    }
    let t = mean / stderr;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    PairedTest { mean, stderr, n, t, p_value: 1.0 - dist.cdf(t) }
}
