//! Small transformer encoder that exposes every layer's hidden states.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DabsError, Result};
use crate::numerics::checkpoint::{read_records, write_records};
use crate::numerics::params::uniform;
use crate::numerics::{LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 2048, d: 64, layers: 8, heads: 4, ffn_mult: 4, max_len: 64, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.vocab_size == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(DabsError::Config("encoder extents must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(DabsError::Config(format!("encoder width {} is not divisible by {} heads", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DabsError::Config(format!("encoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Post-block states of every layer, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStack {
    pub states: Vec<Tensor>,
}

impl HiddenStack {
    pub fn new(states: Vec<Tensor>) -> Result<Self> {
        let first = states.first().ok_or_else(|| DabsError::Shape("empty hidden stack".into()))?;
        if first.rank() != 2 || states.iter().any(|s| s.shape() != first.shape()) {
            return Err(DabsError::Shape("hidden stack layers must share one n x d shape".into()));
        }
        Ok(Self { states })
    }

    pub fn n(&self) -> usize {
        self.states[0].rows()
    }

    pub fn d(&self) -> usize {
        self.states[0].cols()
    }

    pub fn layers(&self) -> usize {
        self.states.len()
    }

    pub fn round_to_f32(&mut self) {
        self.states.iter_mut().for_each(Tensor::round_to_f32);
    }
}

/// Writes a stack in the checkpoint container; values are stored as `f32`.
pub fn save_stack(stack: &HiddenStack, path: &Path) -> Result<()> {
    let header = Tensor::vector(vec![stack.n() as f64, stack.d() as f64, stack.layers() as f64]);
    let names: Vec<String> = (0..stack.layers()).map(|l| format!("layer.{l}")).collect();
    let mut records = vec![("__header__", &header)];
    records.extend(names.iter().map(String::as_str).zip(&stack.states));
    write_records(path, records)
}

pub fn load_stack(path: &Path) -> Result<HiddenStack> {
    let records = read_records(path)?;
    let (header, rest) = records.split_first().ok_or_else(|| format_err("missing header record"))?;
    if header.name != "__header__" || header.value.numel() != 3 {
        return Err(format_err("first record is not a (n, d, L) header"));
    }
    let h = header.value.data();
    let (n, d, l) = (h[0] as usize, h[1] as usize, h[2] as usize);
    if rest.len() != l {
        return Err(format_err(&format!("header declares {l} layers, file holds {}", rest.len())));
    }
    for (i, r) in rest.iter().enumerate() {
        if r.name != format!("layer.{i}") || r.value.shape() != [n, d] {
            return Err(format_err(&format!("record `{}` does not match header ({n} x {d})", r.name)));
        }
    }
    HiddenStack::new(rest.iter().map(|r| r.value.clone()).collect())
}

fn format_err(message: &str) -> DabsError {
    DabsError::Format { offset: 0, message: message.into() }
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

/// Encoder parameters. The parameters themselves live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embedding: ParamId,
    blocks: Vec<Block>,
}

/// Tape handles for one forward pass.
pub struct EncoderPass {
    pub states: Vec<Var>,
    /// `[layer][head]` attention matrices.
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add("encoder.embedding", uniform(rng, &[cfg.vocab_size, cfg.d], 1.0))?;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.block{l}");
                Ok(Block {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), cfg.d)?,
                    attn: MultiHeadAttention::new(store, rng, &format!("{p}.attn"), cfg.d, cfg.heads, cfg.dropout)?,
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), cfg.d)?,
                    ffn: Mlp::new(store, rng, &format!("{p}.ffn"), (cfg.d, cfg.d * cfg.ffn_mult, cfg.d), cfg.dropout)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, embedding, blocks })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(DabsError::Input("cannot encode an empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(DabsError::Input(format!("{} tokens exceed max_len {}", tokens.len(), self.cfg.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(DabsError::Input(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<EncoderPass> {
        self.check_tokens(tokens)?;
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, tokens)?;
        let pos = tape.constant(sinusoidal(tokens.len(), self.cfg.d));
        let mut x = tape.add(emb, pos)?;
        x = tape.dropout(x, self.cfg.dropout)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.attn_norm.forward(tape, store, x)?;
            let a = b.attn.forward(tape, store, h)?;
            let o = tape.dropout(a.output, self.cfg.dropout)?;
            x = tape.add(x, o)?;
            let h = b.ffn_norm.forward(tape, store, x)?;
            let f = b.ffn.forward(tape, store, h)?;
            let f = tape.dropout(f, self.cfg.dropout)?;
            x = tape.add(x, f)?;
            states.push(x);
            attention.push(a.weights);
        }
        Ok(EncoderPass { states, attention })
    }

    /// Eval-mode pass returning plain tensors.
    pub fn encode(&self, store: &ParamStore, tokens: &[usize]) -> Result<HiddenStack> {
        let mut tape = Tape::inference();
        let pass = self.forward(&mut tape, store, tokens)?;
        HiddenStack::new(pass.states.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

/// Fixed sine/cosine position table, `[n x d]`.
pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("positive extents")
}
