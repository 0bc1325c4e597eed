use serde::{Deserialize, Serialize};

use crate::acbs::{Label, ReadVars, Span};
use crate::error::{DabsError, Result};
use crate::numerics::{Tape, Var};

/// Upper clamp for `w * m` inside `-ln(1 - w * m)`.
pub const MASK_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPenalty {
    /// Mean over positions of `-ln(1 - clamp(w_t m_t))`.
    Bce,
    /// `||w * m||_1`.
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda_ent: f64,
    pub mask_penalty: MaskPenalty,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 1e-3, lambda_m: 1e-3, lambda_ent: 1e-2, mask_penalty: MaskPenalty::Bce }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_s, self.lambda_m, self.lambda_ent].iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(DabsError::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[gold]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, gold: Label) -> Result<Var> {
    let ls = tape.log_softmax(logits);
    let p = tape.pick(ls, gold.index())?;
    Ok(tape.scale(p, -1.0))
}

pub fn reg_sparsity(tape: &mut Tape, w: Var) -> Var {
    tape.mean(w)
}

fn span_mask(n: usize, span: Span) -> Vec<f64> {
    (1..=n).map(|t| if span.contains(t) { 1.0 } else { 0.0 }).collect()
}

pub fn reg_span_mask(tape: &mut Tape, w: Var, span: Span, kind: MaskPenalty) -> Var {
    let n = tape.value(w).numel();
    let wm = tape.const_mul(w, span_mask(n, span));
    match kind {
        MaskPenalty::Bce => {
            let p = tape.neg_log1m_clamped(wm, MASK_CLAMP);
            tape.mean(p)
        }
        MaskPenalty::L1 => tape.sum(wm),
    }
}

/// `sum_i g_i ln g_i`, with `0 ln 0 = 0`.
pub fn reg_gate_entropy(tape: &mut Tape, g: Var) -> Var {
    let e = tape.xlogx(g);
    tape.sum(e)
}

/// Per-instance objective. Regularizers whose selector is disabled have no
/// gates to act on and are left out.
pub fn instance_loss(tape: &mut Tape, read: &ReadVars, gold: Label, span: Span, weights: &LossWeights) -> Result<Var> {
    let mut total = cross_entropy(tape, read.logits, gold)?;
    if let Some(w) = read.w {
        if weights.lambda_s != 0.0 {
            let r = reg_sparsity(tape, w);
            let r = tape.scale(r, weights.lambda_s);
            total = tape.add(total, r)?;
        }
        if weights.lambda_m != 0.0 {
            let r = reg_span_mask(tape, w, span, weights.mask_penalty);
            let r = tape.scale(r, weights.lambda_m);
            total = tape.add(total, r)?;
        }
    }
    if let Some(g) = read.g {
        if weights.lambda_ent != 0.0 {
            let r = reg_gate_entropy(tape, g);
            let r = tape.scale(r, weights.lambda_ent);
            total = tape.add(total, r)?;
        }
    }
    Ok(total)
}

/// Mean of per-instance objectives.
pub fn total_loss(tape: &mut Tape, items: &[(ReadVars, Label, Span)], weights: &LossWeights) -> Result<Var> {
    if items.is_empty() {
        return Err(DabsError::Input("total_loss over an empty batch".into()));
    }
    let losses = items
        .iter()
        .map(|(r, gold, span)| instance_loss(tape, r, *gold, *span, weights))
        .collect::<Result<Vec<_>>>()?;
    let s = sum_scalars(tape, &losses)?;
    Ok(tape.scale(s, 1.0 / losses.len() as f64))
}

/// Sum of scalar nodes, accumulated left to right.
pub fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| DabsError::Input("sum over no terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Plain-value versions used by reports and tests.
pub mod values {
    use super::MASK_CLAMP;

    pub fn cross_entropy(logits: &[f64], gold: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - logits[gold]
    }

    pub fn sparsity(w: &[f64]) -> f64 {
        w.iter().sum::<f64>() / w.len() as f64
    }

    pub fn span_mask(w: &[f64], mask: &[f64]) -> f64 {
        w.iter().zip(mask).map(|(w, m)| -(1.0 - (w * m).clamp(0.0, MASK_CLAMP)).ln()).sum::<f64>() / w.len() as f64
    }

    pub fn gate_entropy(g: &[f64]) -> f64 {
        g.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum()
    }
}
