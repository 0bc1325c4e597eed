//! Parameterized building blocks composed from tape ops.

use rand_chacha::ChaCha8Rng;

use super::params::{uniform, xavier, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{DabsError, Result};

/// Affine map `x W + b` with `W: [in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron `in -> hidden -> out` with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: (usize, usize, usize),
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), dims.0, dims.1)?,
            out: Linear::new(store, rng, &format!("{name}.fc2"), dims.1, dims.2)?,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout)?;
        self.out.forward(tape, store, h)
    }
}

/// Gated recurrent unit parameters. Input-side weights are `[d_in x d]`,
/// recurrent weights `[d x d]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d: usize) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = |suffix: &str, rows: usize| store.add(format!("{name}.{suffix}"), uniform(rng, &[rows, d], bound));
        let w_z = w("w_z", d_in)?;
        let w_r = w("w_r", d_in)?;
        let w_n = w("w_n", d_in)?;
        let u_z = w("u_z", d)?;
        let u_r = w("u_r", d)?;
        let u_n = w("u_n", d)?;
        Ok(Self {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z: store.add(format!("{name}.b_z"), Tensor::zeros(&[d]))?,
            b_r: store.add(format!("{name}.b_r"), Tensor::zeros(&[d]))?,
            b_n: store.add(format!("{name}.b_n"), Tensor::zeros(&[d]))?,
            d_in,
            d,
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [self.w_z, self.w_r, self.w_n, self.u_z, self.u_r, self.u_n, self.b_z, self.b_r, self.b_n]
    }

    /// One step for a batch of rows:
    ///
    /// ```text
    /// z = sigmoid(x W_z + h U_z + b_z)
    /// r = sigmoid(x W_r + h U_r + b_r)
    /// n = tanh(x W_n + r * (h U_n) + b_n)
    /// h' = (1 - z) * n + z * h
    /// ```
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_in || tape.value(h).cols() != self.d {
            return Err(DabsError::Shape(format!(
                "gru_cell: x {:?} / h {:?} do not match d_in={} d={}",
                tape.shape(x),
                tape.shape(h),
                self.d_in,
                self.d
            )));
        }
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId| -> Result<Var> {
            let (w, u, b) = (tape.param(store, w), tape.param(store, u), tape.param(store, b));
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(h, u)?;
            let s = tape.add(xw, hu)?;
            tape.add_row(s, b)
        };
        let z = gate(tape, self.w_z, self.u_z, self.b_z)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, self.w_r, self.u_r, self.b_r)?;
        let r = tape.sigmoid(r);
        let (w_n, u_n, b_n) = (tape.param(store, self.w_n), tape.param(store, self.u_n), tape.param(store, self.b_n));
        let xw = tape.matmul(x, w_n)?;
        let hu = tape.matmul(h, u_n)?;
        let rhu = tape.mul(r, hu)?;
        let pre = tape.add(xw, rhu)?;
        let pre = tape.add_row(pre, b_n)?;
        let cand = tape.tanh(pre);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, cand)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}

/// Multi-head scaled dot-product self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
    pub dropout: f64,
}

/// Result of one attention call: the projected output plus every head's
/// `n x n` weight matrix (rows sum to one).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(DabsError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d, d)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d, d)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d, d)?,
            heads,
            d,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<AttentionOutput> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1.0)?;
            weights.push(attn);
            let attn = tape.dropout(attn, self.dropout)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let output = self.output.forward(tape, store, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}
