use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of perturbing at one injection step, over a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub injection_step: usize,
    pub clean_scores: Vec<f64>,
    pub perturbed_scores: Vec<f64>,
    /// `1 − CKA` at the last measured step, averaged over instances.
    pub final_dissimilarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub injection_steps: Vec<usize>,
    /// Mean `clean − perturbed` score per injection step.
    pub score_drop: Vec<f64>,
    pub score_drop_stderr: Vec<f64>,
    pub final_dissimilarity: Vec<f64>,
    pub n: Vec<usize>,
    /// Injection step with the largest mean drop.
    pub peak_step: usize,
    /// Peak position as a fraction of the schedule, for proportional comparison.
    pub peak_fraction: f64,
}

/// Mean and standard error of a sample.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sensitivity_curve(points: &[SweepPoint], n_steps: usize) -> Result<SensitivityCurve> {
    if points.is_empty() {
        return Err(Error::Analysis("empty perturbation sweep".into()));
    }
    let mut curve = SensitivityCurve {
        injection_steps: Vec::new(),
        score_drop: Vec::new(),
        score_drop_stderr: Vec::new(),
        final_dissimilarity: Vec::new(),
        n: Vec::new(),
        peak_step: 0,
        peak_fraction: 0.0,
    };
    for p in points {
        if p.clean_scores.len() != p.perturbed_scores.len() || p.clean_scores.is_empty() {
            return Err(Error::Analysis(format!("unpaired scores at injection step {}", p.injection_step)));
        }
        let drops: Vec<f64> = p.clean_scores.iter().zip(&p.perturbed_scores).map(|(c, q)| c - q).collect();
        let (m, se) = mean_stderr(&drops);
        curve.injection_steps.push(p.injection_step);
        curve.score_drop.push(m);
        curve.score_drop_stderr.push(se);
        curve.final_dissimilarity.push(p.final_dissimilarity);
        curve.n.push(drops.len());
    }
    let peak = curve
        .score_drop
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > curve.score_drop[best] { i } else { best });
    curve.peak_step = curve.injection_steps[peak];
    curve.peak_fraction = curve.peak_step as f64 / n_steps.max(1) as f64;
    Ok(curve)
}
