use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::acbs::Label;
use crate::error::{DabsError, Result};

/// Aspect-instance classification report. `confusion[gold][pred]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub confusion: [[usize; 3]; 3],
    pub n_instances: usize,
}

pub fn evaluate(predictions: &[Label], golds: &[Label]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(DabsError::Input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, g) in predictions.iter().zip(golds) {
        confusion[g.index()][p.index()] += 1;
    }
    let n = golds.len();
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    let mut f1 = [0.0; 3];
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        precision[c] = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        recall[c] = if actual > 0 { tp / actual as f64 } else { 0.0 };
        f1[c] = if precision[c] + recall[c] > 0.0 { 2.0 * precision[c] * recall[c] / (precision[c] + recall[c]) } else { 0.0 };
    }
    Ok(EvalReport {
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        macro_f1: f1.iter().sum::<f64>() / 3.0,
        precision,
        recall,
        f1,
        confusion,
        n_instances: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub delta_mean: f64,
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub significant: bool,
    /// Differences have zero variance; `t` is reported as infinite and `p` as 0.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`, matched by position.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DabsError::Input(format!("paired test needs two equal lists of length >= 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let t = if mean < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
        return Ok(PairedTest { delta_mean: mean, t, p: 0.0, df, significant: false, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| DabsError::Domain(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTest { delta_mean: mean, t, p, df, significant: p < 0.05, degenerate: false })
}
