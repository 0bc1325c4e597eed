//! Per-aspect readout over a shared substrate: token gates, depth
//! distribution, gated fusion and the classifier.

use std::fmt;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dora::{DepthSubstrate, SubstrateVars};
use crate::error::{DabsError, Result};
use crate::numerics::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Neutral,
    Negative,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Positive, Label::Neutral, Label::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| DabsError::Input(format!("label index {i} outside 0..3")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Neutral => "neutral",
            Label::Negative => "negative",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = DabsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" => Ok(Label::Positive),
            "neutral" => Ok(Label::Neutral),
            "negative" => Ok(Label::Negative),
            other => Err(DabsError::Input(format!("label `{other}` is not positive, neutral or negative"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token interval `[start, end]`, 1-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn check(self, n: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > n {
            return Err(DabsError::Input(format!("span [{}, {}] invalid for {n} tokens", self.start, self.end)));
        }
        Ok(())
    }

    /// 0-based half-open row range.
    pub fn rows(self) -> (usize, usize) {
        (self.start - 1, self.end)
    }

    pub fn len(self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectQuery {
    pub span: Span,
    pub label: Option<Label>,
}

/// How the readout turns the selected evidence into `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Token selection, depth selection and gated fusion.
    Selective,
    /// `h = LN(a)`: the aspect span mean alone.
    AspectOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcbsConfig {
    pub tau_alpha: f64,
    pub tau_g: f64,
    pub eps: f64,
    pub heads: usize,
    pub use_token_sel: bool,
    pub use_layer_sel: bool,
    pub use_gated_fusion: bool,
    pub readout: Readout,
    pub dropout: f64,
    pub classifier_dropout: f64,
}

impl Default for AcbsConfig {
    fn default() -> Self {
        Self {
            tau_alpha: 1.0,
            tau_g: 1.0,
            eps: 1e-6,
            heads: 4,
            use_token_sel: true,
            use_layer_sel: true,
            use_gated_fusion: true,
            readout: Readout::Selective,
            dropout: 0.1,
            classifier_dropout: 0.2,
        }
    }
}

impl AcbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_alpha > 0.0 && self.tau_g > 0.0) {
            return Err(DabsError::Config("temperatures must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(DabsError::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Inference-time restriction of the depth distribution to a subset of
/// levels (0-based indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMask {
    allowed: Vec<usize>,
}

impl DepthMask {
    pub fn new(mut allowed: Vec<usize>, k: usize) -> Result<Self> {
        allowed.sort_unstable();
        allowed.dedup();
        if allowed.is_empty() {
            return Err(DabsError::Config("depth mask must allow at least one level".into()));
        }
        if let Some(&u) = allowed.iter().find(|&&u| u >= k) {
            return Err(DabsError::Config(format!("depth mask level {u} outside 0..{k}")));
        }
        Ok(Self { allowed })
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    /// Zeroes mass outside the mask and renormalizes; uniform over the mask
    /// when no allowed level carries mass.
    pub fn apply(&self, alpha: &[f64]) -> Vec<f64> {
        let total: f64 = self.allowed.iter().map(|&u| alpha[u]).sum();
        if self.allowed.len() == alpha.len() && total > 0.0 {
            return alpha.to_vec();
        }
        let mut out = vec![0.0; alpha.len()];
        for &u in &self.allowed {
            out[u] = if total > 0.0 { alpha[u] / total } else { 1.0 / self.allowed.len() as f64 };
        }
        out
    }
}

/// Per-aspect record of the readout's decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub g: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub prediction: Label,
}

/// One JSON-lines export row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sentence_id: String,
    pub span: [usize; 2],
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub g: Vec<f64>,
    pub logits: Vec<f64>,
    pub prediction: Label,
    pub gold: Option<Label>,
}

impl TraceRecord {
    pub fn new(sentence_id: &str, q: &AspectQuery, t: &SelectionTrace) -> Self {
        Self {
            sentence_id: sentence_id.to_string(),
            span: [q.span.start, q.span.end],
            w: t.w.clone(),
            alpha: t.alpha.clone(),
            g: t.g.clone(),
            logits: t.logits.clone(),
            prediction: t.prediction,
            gold: q.label,
        }
    }
}

pub fn write_traces_jsonl<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Tape handles produced by one aspect read. `w` and `g` are `None` when the
/// corresponding selector is disabled (fixed uniform substitutes).
#[derive(Clone, Debug)]
pub struct ReadVars {
    pub w: Option<Var>,
    pub alpha: Option<Var>,
    pub g: Option<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Acbs {
    pub cfg: AcbsConfig,
    pub context: MultiHeadAttention,
    pub token_gate: Mlp,
    pub depth_selector: Mlp,
    pub fusion_gate: Mlp,
    pub norm_c: LayerNorm,
    pub norm_d: LayerNorm,
    pub norm_a: LayerNorm,
    pub classifier: Linear,
    pub k: usize,
}

impl Acbs {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: AcbsConfig, d: usize, k: usize) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.dropout;
        Ok(Self {
            context: MultiHeadAttention::new(store, rng, "acbs.context", d, cfg.heads, p)?,
            token_gate: Mlp::new(store, rng, "acbs.token_gate", (2 * d, d, 1), p)?,
            depth_selector: Mlp::new(store, rng, "acbs.depth_selector", (2 * d, d, k), p)?,
            fusion_gate: Mlp::new(store, rng, "acbs.fusion_gate", (3 * d, d, 3), p)?,
            norm_c: LayerNorm::new(store, "acbs.norm_c", d)?,
            norm_d: LayerNorm::new(store, "acbs.norm_d", d)?,
            norm_a: LayerNorm::new(store, "acbs.norm_a", d)?,
            classifier: Linear::new(store, rng, "acbs.classifier", d, 3)?,
            k,
            cfg,
        })
    }

    /// `C = MHA(E, E, E)`, computed once per sentence.
    pub fn reorganize_context(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> Result<Var> {
        Ok(self.context.forward(tape, store, e)?.output)
    }

    /// Reads one aspect. `mask` restricts the depth distribution (inference
    /// only).
    pub fn read(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sub: &SubstrateVars,
        c_ctx: Var,
        span: Span,
        mask: Option<&DepthMask>,
    ) -> Result<ReadVars> {
        let n = tape.value(sub.e).rows();
        span.check(n)?;
        let a = aspect_vector(tape, sub.e, span)?;
        if self.cfg.readout == Readout::AspectOnly {
            let h = self.norm_a.forward(tape, store, a)?;
            let logits = self.classify(tape, store, h)?;
            return Ok(ReadVars { w: None, alpha: None, g: None, logits });
        }

        let (w, c) = if self.cfg.use_token_sel {
            let (w, c) = self.token_select(tape, store, c_ctx, a)?;
            (Some(w), c)
        } else {
            (None, tape.mean_rows(c_ctx)?)
        };

        let alpha = if self.cfg.use_layer_sel {
            let pooled = tape.mean_rows(c_ctx)?;
            let x = tape.concat_cols(&[a, pooled])?;
            let logits = self.depth_selector.forward(tape, store, x)?;
            tape.softmax(logits, self.cfg.tau_alpha)?
        } else {
            tape.constant(Tensor::full(&[1, self.k], 1.0 / self.k as f64))
        };
        let alpha = match mask {
            Some(m) => {
                if tape.is_training() {
                    return Err(DabsError::Config("depth masks apply at inference only".into()));
                }
                let masked = m.apply(tape.value(alpha).data());
                tape.constant(Tensor::new(vec![1, self.k], masked)?)
            }
            None => alpha,
        };
        let depth = depth_summary(tape, &sub.levels, alpha)?;

        let c_hat = self.norm_c.forward(tape, store, c)?;
        let d_hat = self.norm_d.forward(tape, store, depth)?;
        let a_hat = self.norm_a.forward(tape, store, a)?;
        let g = if self.cfg.use_gated_fusion {
            let x = tape.concat_cols(&[c_hat, d_hat, a_hat])?;
            let logits = self.fusion_gate.forward(tape, store, x)?;
            Some(tape.softmax(logits, self.cfg.tau_g)?)
        } else {
            None
        };
        let gv = match g {
            Some(g) => g,
            None => tape.constant(Tensor::full(&[1, 3], 1.0 / 3.0)),
        };
        let parts = tape.stack_rows(&[c_hat, d_hat, a_hat])?;
        let h = tape.matmul(gv, parts)?;
        let logits = self.classify(tape, store, h)?;
        Ok(ReadVars { w, alpha: Some(alpha), g, logits })
    }

    /// `w_t = sigmoid(MLP([C_t; a]))`, `c = sum_t w_t C_t / (sum_t w_t + eps)`.
    pub fn token_select(&self, tape: &mut Tape, store: &ParamStore, c_ctx: Var, a: Var) -> Result<(Var, Var)> {
        let n = tape.value(c_ctx).rows();
        let ab = tape.broadcast_rows(a, n)?;
        let x = tape.concat_cols(&[c_ctx, ab])?;
        let s = self.token_gate.forward(tape, store, x)?;
        let w = tape.sigmoid(s);
        Ok((w, gated_pool(tape, w, c_ctx, self.cfg.eps)?))
    }

    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let h = tape.dropout(h, self.cfg.classifier_dropout)?;
        self.classifier.forward(tape, store, h)
    }

    /// Eval-mode context for a built substrate.
    pub fn context_for(&self, store: &ParamStore, sub: &DepthSubstrate) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let e = tape.constant(sub.e.clone());
        let c = self.reorganize_context(&mut tape, store, e)?;
        Ok(tape.value(c).clone())
    }

    /// Eval-mode read against a shared substrate and context. Neither input
    /// is modified.
    pub fn read_aspect(
        &self,
        store: &ParamStore,
        sub: &DepthSubstrate,
        context: &Tensor,
        span: Span,
        mask: Option<&DepthMask>,
    ) -> Result<SelectionTrace> {
        let mut tape = Tape::inference();
        let vars = SubstrateVars {
            e: tape.constant(sub.e.clone()),
            levels: sub.levels.iter().map(|l| tape.constant(l.clone())).collect(),
        };
        let c = tape.constant(context.clone());
        let r = self.read(&mut tape, store, &vars, c, span, mask)?;
        Ok(trace_from(&tape, &r, sub.n()))
    }
}

/// Mean of `E` rows inside the span.
pub fn aspect_vector(tape: &mut Tape, e: Var, span: Span) -> Result<Var> {
    span.check(tape.value(e).rows())?;
    let (lo, hi) = span.rows();
    let rows = tape.slice_rows(e, lo, hi)?;
    tape.mean_rows(rows)
}

/// `sum_t w_t C_t / (sum_t w_t + eps)` for gates `w: [n x 1]`.
pub fn gated_pool(tape: &mut Tape, w: Var, c_ctx: Var, eps: f64) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let num = tape.matmul(wt, c_ctx)?;
    let total = tape.sum(w);
    let den = tape.add_const(total, eps);
    tape.div_scalar(num, den)
}

/// `D = sum_u alpha_u mean_t H_u`.
pub fn depth_summary(tape: &mut Tape, levels: &[Var], alpha: Var) -> Result<Var> {
    let means = levels.iter().map(|&l| tape.mean_rows(l)).collect::<Result<Vec<_>>>()?;
    let m = tape.stack_rows(&means)?;
    tape.matmul(alpha, m)
}

pub fn trace_from(tape: &Tape, r: &ReadVars, n: usize) -> SelectionTrace {
    let logits = tape.value(r.logits).data().to_vec();
    let probs = softmax(&logits);
    let prediction = argmax(&probs);
    SelectionTrace {
        w: r.w.map(|w| tape.value(w).data().to_vec()).unwrap_or_else(|| vec![1.0; n]),
        alpha: r.alpha.map(|a| tape.value(a).data().to_vec()).unwrap_or_default(),
        g: r.g.map(|g| tape.value(g).data().to_vec()).unwrap_or_else(|| vec![1.0 / 3.0; 3]),
        logits,
        probs,
        prediction: Label::from_index(prediction).expect("three logits"),
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::params::uniform;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn aspect_vector_examples() {
        let mut t = Tape::inference();
        let e = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[4.0, 4.0]]));
        let a = aspect_vector(&mut t, e, Span::new(1, 2)).unwrap();
        assert_eq!(t.value(a).data(), &[0.5, 0.5]);
        let a = aspect_vector(&mut t, e, Span::new(3, 3)).unwrap();
        assert_eq!(t.value(a).data(), &[4.0, 4.0]);
        assert!(matches!(aspect_vector(&mut t, e, Span::new(2, 4)), Err(DabsError::Input(_))));
        assert!(matches!(aspect_vector(&mut t, e, Span::new(0, 1)), Err(DabsError::Input(_))));
        assert!(matches!(aspect_vector(&mut t, e, Span::new(3, 2)), Err(DabsError::Input(_))));
    }

    #[test]
    fn gated_pool_examples() {
        let mut t = Tape::inference();
        let c = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let eps = 1e-6;
        let w = t.constant(rows(&[&[1.0], &[1.0]]));
        let p = gated_pool(&mut t, w, c, eps).unwrap();
        assert_abs_diff_eq!(t.value(p).data()[0], 0.5, epsilon = 2.0 * eps);
        let w = t.constant(rows(&[&[1.0], &[0.0]]));
        let p = gated_pool(&mut t, w, c, eps).unwrap();
        assert_abs_diff_eq!(t.value(p).data()[0], 1.0 / (1.0 + eps), epsilon = 1e-15);
        let w = t.constant(rows(&[&[0.5], &[0.25]]));
        let p = gated_pool(&mut t, w, c, eps).unwrap();
        assert_abs_diff_eq!(t.value(p).data()[0], 0.6667, epsilon = 1e-3);
        assert_abs_diff_eq!(t.value(p).data()[1], 0.3333, epsilon = 1e-3);
    }

    #[test]
    fn depth_summary_examples() {
        let mut t = Tape::inference();
        let p = t.constant(rows(&[&[1.0, 2.0], &[1.0, 2.0]]));
        let q = t.constant(rows(&[&[4.0, -1.0], &[4.0, -1.0]]));
        let alpha = t.constant(rows(&[&[2.0 / 3.0, 1.0 / 3.0]]));
        let d = depth_summary(&mut t, &[p, q], alpha).unwrap();
        assert_abs_diff_eq!(t.value(d).data()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(d).data()[1], 1.0, epsilon = 1e-12);
        let one_hot = t.constant(rows(&[&[0.0, 1.0]]));
        let d = depth_summary(&mut t, &[p, q], one_hot).unwrap();
        assert_eq!(t.value(d).data(), &[4.0, -1.0]);
    }

    #[test]
    fn label_order_and_classifier_softmax() {
        assert_eq!(Label::ALL.map(Label::index), [0, 1, 2]);
        assert_eq!("Negative".parse::<Label>().unwrap(), Label::Negative);
        assert!("mixed".parse::<Label>().is_err());
        let p = softmax(&[2.0, 0.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.7870, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.1065, epsilon = 1e-4);
        assert_abs_diff_eq!(p[0], 2f64.exp() / (2f64.exp() + 2.0), epsilon = 1e-15);
        assert_eq!(softmax(&[0.0; 3]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn depth_mask_examples() {
        let m = DepthMask::new(vec![4, 5], 6).unwrap();
        assert_eq!(m.apply(&[1.0 / 6.0; 6]), vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let full = DepthMask::new((0..6).collect(), 6).unwrap();
        let a = [0.1, 0.2, 0.3, 0.4, 0.0, 0.0];
        assert_eq!(full.apply(&a), a.to_vec());
        let m = DepthMask::new(vec![2, 3], 6).unwrap();
        let out = m.apply(&a);
        assert_abs_diff_eq!(out[2], 3.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[3], 4.0 / 7.0, epsilon = 1e-12);
        let m = DepthMask::new(vec![4, 5], 6).unwrap();
        assert_eq!(m.apply(&a), vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(DepthMask::new(vec![], 6), Err(DabsError::Config(_))));
        assert!(matches!(DepthMask::new(vec![6], 6), Err(DabsError::Config(_))));
    }

    fn toy(cfg: AcbsConfig, d: usize, k: usize, seed: u64) -> (ParamStore, Acbs, DepthSubstrate) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acbs = Acbs::new(&mut store, &mut rng, cfg, d, k).unwrap();
        let n = 5;
        let sub = DepthSubstrate {
            e: uniform(&mut rng, &[n, d], 2.0),
            levels: (0..k).map(|_| uniform(&mut rng, &[n, d], 2.0)).collect(),
        };
        (store, acbs, sub)
    }

    #[test]
    fn uniform_attention_over_identical_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 2, 1, 0.0).unwrap();
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            *store.value_mut(lin.weight) = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        }
        let mut t = Tape::inference();
        let x = t.constant(rows(&[&[0.3, -0.7], &[0.3, -0.7], &[0.3, -0.7]]));
        let out = mha.forward(&mut t, &store, x).unwrap();
        assert!(t.value(out.output).max_abs_diff(t.value(x)) < 1e-15);

        // n = 2, d = 2 hand case: scores q.k / sqrt(2)
        let x = t.constant(rows(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let out = mha.forward(&mut t, &store, x).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let r0 = softmax(&[s, 0.0]);
        let r1 = softmax(&[0.0, 4.0 * s]);
        let want = rows(&[&[r0[0], 2.0 * r0[1]], &[r1[0], 2.0 * r1[1]]]);
        assert!(t.value(out.output).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn read_matches_step_by_step_recomputation() {
        let (store, acbs, sub) = toy(AcbsConfig { heads: 2, ..Default::default() }, 8, 3, 4);
        let ctx = acbs.context_for(&store, &sub).unwrap();
        let span = Span::new(2, 3);
        let trace = acbs.read_aspect(&store, &sub, &ctx, span, None).unwrap();

        // independent recomputation on plain vectors
        let d = 8;
        let mean = |m: &Tensor, lo: usize, hi: usize| -> Vec<f64> {
            (0..d).map(|c| (lo..hi).map(|r| m.get2(r, c)).sum::<f64>() / (hi - lo) as f64).collect()
        };
        let a = mean(&sub.e, 1, 3);
        let pooled = mean(&ctx, 0, 5);
        let mlp = |m: &Mlp, x: &[f64]| -> Vec<f64> {
            let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
                let w = store.value(l.weight);
                let b = store.value(l.bias).data();
                (0..w.cols()).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w.get2(i, j)).sum::<f64>()).collect()
            };
            let h: Vec<f64> = lin(&m.hidden, x).into_iter().map(crate::numerics::tape::gelu).collect();
            lin(&m.out, &h)
        };
        let w: Vec<f64> = (0..5)
            .map(|t| {
                let x: Vec<f64> = ctx.row(t).iter().chain(&a).cloned().collect();
                crate::numerics::tape::sigmoid(mlp(&acbs.token_gate, &x)[0])
            })
            .collect();
        let wsum: f64 = w.iter().sum();
        let c: Vec<f64> = (0..d).map(|j| (0..5).map(|t| w[t] * ctx.get2(t, j)).sum::<f64>() / (wsum + 1e-6)).collect();
        let x: Vec<f64> = a.iter().chain(&pooled).cloned().collect();
        let alpha = softmax(&mlp(&acbs.depth_selector, &x));
        let level_means: Vec<Vec<f64>> = sub.levels.iter().map(|l| mean(l, 0, 5)).collect();
        let dsum: Vec<f64> = (0..d).map(|j| (0..3).map(|u| alpha[u] * level_means[u][j]).sum()).collect();
        let ln = |v: &[f64]| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d as f64;
            v.iter().map(|x| (x - mu) / (var + 1e-5).sqrt()).collect()
        };
        let (ch, dh, ah) = (ln(&c), ln(&dsum), ln(&a));
        let x: Vec<f64> = ch.iter().chain(&dh).chain(&ah).cloned().collect();
        let g = softmax(&mlp(&acbs.fusion_gate, &x));
        let h: Vec<f64> = (0..d).map(|j| g[0] * ch[j] + g[1] * dh[j] + g[2] * ah[j]).collect();
        let wc = store.value(acbs.classifier.weight);
        let bc = store.value(acbs.classifier.bias).data();
        let logits: Vec<f64> = (0..3).map(|k| bc[k] + (0..d).map(|j| h[j] * wc.get2(j, k)).sum::<f64>()).collect();

        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-10);
        assert!(close(&trace.w, &w));
        assert!(close(&trace.alpha, &alpha));
        assert!(close(&trace.g, &g));
        assert!(close(&trace.logits, &logits));
    }

    #[test]
    fn disabled_token_selection_reports_unit_gates() {
        let cfg = AcbsConfig { heads: 2, use_token_sel: false, use_gated_fusion: false, ..Default::default() };
        let (store, acbs, sub) = toy(cfg, 8, 3, 1);
        let ctx = acbs.context_for(&store, &sub).unwrap();
        let tr = acbs.read_aspect(&store, &sub, &ctx, Span::new(1, 1), None).unwrap();
        assert_eq!(tr.w, vec![1.0; 5]);
        assert_eq!(tr.g, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn reads_are_independent_of_other_aspects() {
        let (store, acbs, sub) = toy(AcbsConfig { heads: 2, ..Default::default() }, 8, 3, 2);
        let ctx = acbs.context_for(&store, &sub).unwrap();
        let (s1, s2) = (Span::new(1, 2), Span::new(4, 5));
        let a1 = acbs.read_aspect(&store, &sub, &ctx, s1, None).unwrap();
        let a2 = acbs.read_aspect(&store, &sub, &ctx, s2, None).unwrap();
        let b2 = acbs.read_aspect(&store, &sub, &ctx, s2, None).unwrap();
        let b1 = acbs.read_aspect(&store, &sub, &ctx, s1, None).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn trace_export_has_named_fields() {
        let (store, acbs, sub) = toy(AcbsConfig { heads: 2, ..Default::default() }, 8, 3, 2);
        let ctx = acbs.context_for(&store, &sub).unwrap();
        let q = AspectQuery { span: Span::new(2, 2), label: Some(Label::Neutral) };
        let tr = acbs.read_aspect(&store, &sub, &ctx, q.span, None).unwrap();
        let mut buf = Vec::new();
        write_traces_jsonl(&mut buf, &[TraceRecord::new("s7", &q, &tr)]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for key in ["sentence_id", "span", "w", "alpha", "g", "logits", "prediction", "gold"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["gold"], "neutral");
    }

    #[test]
    fn low_temperature_collapses_alpha() {
        let mut t = Tape::inference();
        let x = t.constant(rows(&[&[0.3, 0.1, -0.2, 0.25]]));
        let a = t.softmax(x, 0.01).unwrap();
        assert!(t.value(a).data()[0] > 0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn alpha_and_g_are_distributions(seed in 0u64..10_000, lo in 1usize..5, extra in 0usize..3, tau in 0.1f64..3.0) {
            let cfg = AcbsConfig { heads: 2, tau_alpha: tau, tau_g: tau, ..Default::default() };
            let (store, acbs, sub) = toy(cfg, 8, 4, seed);
            let ctx = acbs.context_for(&store, &sub).unwrap();
            let span = Span::new(lo, (lo + extra).min(5));
            let tr = acbs.read_aspect(&store, &sub, &ctx, span, None).unwrap();
            for p in [&tr.alpha, &tr.g, &tr.probs] {
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert!(tr.w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn masked_alpha_stays_inside_mask(raw in prop::collection::vec(0.0f64..1.0, 6), bits in 1u8..64) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-12;
            let alpha: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let allowed: Vec<usize> = (0..6).filter(|u| bits & (1 << u) != 0).collect();
            let m = DepthMask::new(allowed.clone(), 6).unwrap();
            let out = m.apply(&alpha);
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (u, v) in out.iter().enumerate() {
                if !allowed.contains(&u) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }

        #[test]
        fn softmax_shift_leaves_alpha_unchanged(logits in prop::collection::vec(-5.0f64..5.0, 6), c in -20.0f64..20.0) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let (a, b) = (softmax(&logits), softmax(&shifted));
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
