//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! arena; [`Var`] is an index into that arena. [`Tape::backward`] walks the
//! arena in reverse and accumulates gradients into every node that depends on
//! a gradient-tracking leaf. Parameters enter through [`Tape::param`], which
//! copies the current value out of a [`ParamStore`] once per tape, and their
//! gradients are read back with [`Tape::param_grads`].
//!
//! Matrices are rank-2; vectors used by the model are `1 x d` rows. Ops that
//! act "per row" (layer norm, softmax) treat every leading axis as rows.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{DabsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stabilizer added to the variance inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, temperature: f64 },
    LogSoftmax(Var),
    Conv1d { x: Var, kernel: Var },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    BroadcastRows(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConstMul { x: Var, factor: Vec<f64> },
    NegLog1mClamped { x: Var, hi: f64 },
    XLogX(Var),
    Pick { x: Var, index: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
///
/// A tape (with its dropout stream) is confined to one thread; parallel work
/// uses one tape per worker over a shared read-only [`ParamStore`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
    dropout_rng: Option<ChaCha8Rng>,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape whose parameters track gradients; dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
            dropout_rng: None,
            flops: 0,
        }
    }

    /// Evaluation tape: no parameter gradients, no dropout.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    /// Training tape with dropout driven by the given stream.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self { dropout_rng: Some(rng), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (2 per MAC) of every matmul and convolution recorded.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or an input; `requires_grad` makes it a gradient leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter, copying its value on first use within this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let needs_grad = self.track_params;
        self.nodes.push(Node { value, op: Op::Param, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn two_d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(DabsError::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DabsError::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, p) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(DabsError::Shape(format!(
                "matmul: inner extents differ, {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, p, &mut out);
        self.flops += 2 * (m * k * p) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` (or length-`c`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(DabsError::Shape(format!(
                "add_row: row {:?} does not match columns of {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::Shift(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_const(neg, 1.0)
    }

    fn scalar_of(&self, s: Var, what: &str) -> Result<f64> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(DabsError::Shape(format!("{what}: expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s, "mul_scalar")?;
        let ng = self.ng(x) || self.ng(s);
        let v = self.map(x, |v| v * k, Op::Leaf);
        self.nodes[v.0].needs_grad = ng;
        if ng {
            self.nodes[v.0].op = Op::MulScalar(x, s);
        }
        Ok(v)
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s, "div_scalar")?;
        if k == 0.0 {
            return Err(DabsError::Domain("div_scalar: division by zero".into()));
        }
        let ng = self.ng(x) || self.ng(s);
        let v = self.map(x, |v| v / k, Op::Leaf);
        self.nodes[v.0].needs_grad = ng;
        if ng {
            self.nodes[v.0].op = Op::DivScalar(x, s);
        }
        Ok(v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Inverted dropout. Identity unless the tape is in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(DabsError::Domain(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let factor: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        Ok(self.const_mul(x, factor))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn const_mul(&mut self, x: Var, factor: Vec<f64>) -> Var {
        let src = self.value(x);
        assert_eq!(src.numel(), factor.len(), "const_mul length mismatch");
        let data = src.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(value, Op::ConstMul { x, factor }, ng)
    }

    /// `-ln(1 - clamp(x, 0, hi))`, elementwise.
    pub fn neg_log1m_clamped(&mut self, x: Var, hi: f64) -> Var {
        self.map(x, |v| -(1.0 - v.clamp(0.0, hi)).ln(), Op::NegLog1mClamped { x, hi })
    }

    /// `x ln x` with `0 ln 0 = 0`, elementwise.
    pub fn xlogx(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v * v.ln() } else { 0.0 }, Op::XLogX(x))
    }

    // ---- normalization --------------------------------------------------

    /// Layer norm over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(DabsError::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.rows();
        let mut out = Vec::with_capacity(src.numel());
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in src.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = src.shape().to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// `softmax(x / temperature)` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(DabsError::Domain(format!("softmax temperature must be > 0, got {temperature}")));
        }
        let src = self.value(x);
        let c = src.cols();
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for v in row {
                let e = ((v - max) / temperature).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let shape = src.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, temperature }, ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmax(x), ng)
    }

    // ---- convolution ----------------------------------------------------

    /// Per-channel 1-D convolution of `x: [n x d]` with `kernel: [k x d]`,
    /// zero "same" padding, odd `k`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (n, d) = self.two_d(x, "depthwise_conv1d")?;
        let (k, d2) = self.two_d(kernel, "depthwise_conv1d kernel")?;
        if k % 2 == 0 {
            return Err(DabsError::Domain(format!("depthwise_conv1d: kernel size {k} is even")));
        }
        if d != d2 {
            return Err(DabsError::Shape(format!(
                "depthwise_conv1d: input {:?} and kernel {:?} channel mismatch",
                self.shape(x),
                self.shape(kernel)
            )));
        }
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let half = k / 2;
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..k {
                let src = t + j;
                if src < half || src - half >= n {
                    continue;
                }
                let s = src - half;
                let orow = &mut out[t * d..(t + 1) * d];
                let xrow = &xs[s * d..(s + 1) * d];
                let krow = &ks[j * d..(j + 1) * d];
                for c in 0..d {
                    orow[c] += krow[c] * xrow[c];
                }
            }
        }
        self.flops += 2 * (n * d * k) as u64;
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Conv1d { x, kernel }, ng))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.two_d(parts[0], "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.two_d(p, "concat_cols")?;
            if r != rows {
                return Err(DabsError::Shape(format!("concat_cols: row counts {rows} and {r} differ")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenates matrices along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.two_d(parts[0], "stack_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.two_d(p, "stack_rows")?;
            if c != cols {
                return Err(DabsError::Shape(format!("stack_rows: column counts {cols} and {c} differ")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::StackRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.two_d(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(DabsError::Shape(format!("slice_rows: {start}..{end} out of 0..{r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.two_d(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(DabsError::Shape(format!("slice_cols: {start}..{end} out of 0..{c}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols { x, start }, ng))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.two_d(x, "broadcast_rows")?;
        if r != 1 {
            return Err(DabsError::Shape(format!("broadcast_rows expects one row, got {r}")));
        }
        let row = self.value(x).data().to_vec();
        let data = row.repeat(n);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::BroadcastRows(x), ng))
    }

    /// Mean over rows: `[n x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d(x, "mean_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in src.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(DabsError::Shape(format!("pick: index {index} out of {}", t.numel())));
        }
        let v = t.data()[index];
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Row lookup into `table: [V x d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.two_d(table, "gather_rows")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(DabsError::Input(format!("row id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(src.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DabsError::Domain(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        accumulate(&mut self.grads, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass for `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every bound parameter.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.bound.iter().filter_map(move |(&id, &v)| {
            self.grads.get(v.0).and_then(|g| g.as_deref()).map(|g| (id, g))
        })
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let node = &self.nodes[i];
        let grads = &mut self.grads;
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let p = self.nodes[b.0].value.cols();
                if needs(*a) {
                    // dA = dC * B^T
                    let bv = val(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * p..(r + 1) * p];
                        for kk in 0..k {
                            let brow = &bv[kk * p..(kk + 1) * p];
                            da[r * k + kk] = dot(grow, brow);
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    // dB = A^T * dC
                    let av = val(*a);
                    let mut db = vec![0.0; k * p];
                    for r in 0..m {
                        let grow = &g[r * p..(r + 1) * p];
                        for kk in 0..k {
                            let s = av[r * k + kk];
                            let drow = &mut db[kk * p..(kk + 1) * p];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(&self.nodes[x.0].value);
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] = g[j * r + i2];
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
                if needs(*row) {
                    let c = self.nodes[row.0].value.numel();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *row, &dr);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *x, &d);
            }
            Op::Shift(x) | Op::Reshape(x) => accumulate(grads, *x, g),
            Op::MulScalar(x, s) => {
                let k = val(*s)[0];
                if needs(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                    accumulate(grads, *x, &d);
                }
                if needs(*s) {
                    let ds = dot(g, val(*x));
                    accumulate(grads, *s, &[ds]);
                }
            }
            Op::DivScalar(x, s) => {
                let k = val(*s)[0];
                if needs(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v / k).collect();
                    accumulate(grads, *x, &d);
                }
                if needs(*s) {
                    let ds = -dot(g, val(*x)) / (k * k);
                    accumulate(grads, *s, &[ds]);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.nodes[gain.0].value.numel();
                let gv = val(*gain);
                if needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gain, &dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for (o, v) in db.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, &db);
                }
                if needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hrow) / d as f64;
                        dx.extend(dh.iter().zip(hrow).map(|(dh, h)| r * (dh - mean_dh - h * mean_dh_h)));
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax { x, temperature } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    let s = dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - s) / temperature));
                }
                accumulate(grads, *x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * s));
                }
                accumulate(grads, *x, &dx);
            }
            Op::Conv1d { x, kernel } => {
                let (n, d) = dims2(&self.nodes[x.0].value);
                let k = self.nodes[kernel.0].value.shape()[0];
                let half = k / 2;
                let xs = val(*x);
                let ks = val(*kernel);
                let mut dx = vec![0.0; n * d];
                let mut dk = vec![0.0; k * d];
                for t in 0..n {
                    for j in 0..k {
                        let src = t + j;
                        if src < half || src - half >= n {
                            continue;
                        }
                        let s = src - half;
                        for c in 0..d {
                            let gv = g[t * d + c];
                            dx[s * d + c] += gv * ks[j * d + c];
                            dk[j * d + c] += gv * xs[s * d + c];
                        }
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if needs(*kernel) {
                    accumulate(grads, *kernel, &dk);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if needs(p) {
                        accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(&self.nodes[x.0].value);
                let w = node.value.cols();
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    dx[i2 * c + start..i2 * c + start + w].copy_from_slice(&g[i2 * w..(i2 + 1) * w]);
                }
                accumulate(grads, *x, &dx);
            }
            Op::BroadcastRows(x) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; c];
                for chunk in g.chunks(c) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::MeanRows(x) => {
                let n = self.nodes[x.0].value.rows() as f64;
                let row: Vec<f64> = g.iter().map(|v| v / n).collect();
                let dx = row.repeat(self.nodes[x.0].value.rows());
                accumulate(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.nodes[x.0].value.numel()];
                accumulate(grads, *x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                let dx = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &dx);
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[*index] = g[0];
                accumulate(grads, *x, &dx);
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::ConstMul { x, factor } => {
                let d: Vec<f64> = g.iter().zip(factor).map(|(g, f)| g * f).collect();
                accumulate(grads, *x, &d);
            }
            Op::NegLog1mClamped { x, hi } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if (0.0..=*hi).contains(&v) { g / (1.0 - v) } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::XLogX(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { g * (v.ln() + 1.0) } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
