//! Depth substrate construction: local context refinement of the last layer
//! and an ordered gated recurrence across the last K layers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::HiddenStack;
use crate::error::{DabsError, Result};
use crate::numerics::checkpoint::{read_records, write_records};
use crate::numerics::params::uniform;
use crate::numerics::{GruCell, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    Normal,
    Reversed,
    Shuffled { seed: u64 },
}

impl LayerOrder {
    /// Permutation of `0..k` giving, for each level, which of the selected
    /// layers feeds it.
    pub fn permutation(self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..k).collect();
        match self {
            LayerOrder::Normal => {}
            LayerOrder::Reversed => idx.reverse(),
            LayerOrder::Shuffled { seed } => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        idx
    }

    pub fn label(self) -> String {
        match self {
            LayerOrder::Normal => "normal".into(),
            LayerOrder::Reversed => "reversed".into(),
            LayerOrder::Shuffled { seed } => format!("shuffled({seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoraConfig {
    pub k: usize,
    pub kernel_sizes: Vec<usize>,
    pub beta_init: f64,
    pub layer_order: LayerOrder,
    pub use_depth_gru: bool,
    pub use_lcp: bool,
}

impl Default for DoraConfig {
    fn default() -> Self {
        Self {
            k: 6,
            kernel_sizes: vec![1, 3, 5],
            beta_init: 1.0,
            layer_order: LayerOrder::Normal,
            use_depth_gru: true,
            use_lcp: true,
        }
    }
}

impl DoraConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.k == 0 || self.k > layers {
            return Err(DabsError::Config(format!("depth budget K={} must lie in 1..={layers}", self.k)));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(DabsError::Config(format!("kernel sizes {:?} must be nonempty and odd", self.kernel_sizes)));
        }
        if !self.beta_init.is_finite() {
            return Err(DabsError::Config("beta_init must be finite".into()));
        }
        Ok(())
    }

    /// Encoder layer (0-based) feeding each level, in level order.
    pub fn selected_layers(&self, layers: usize) -> Result<Vec<usize>> {
        self.validate(layers)?;
        let base = layers - self.k;
        Ok(self.layer_order.permutation(self.k).into_iter().map(|p| base + p).collect())
    }
}

/// The reusable per-sentence resource: refined last layer plus K levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSubstrate {
    pub e: Tensor,
    pub levels: Vec<Tensor>,
}

impl DepthSubstrate {
    pub fn n(&self) -> usize {
        self.e.rows()
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }
}

/// Tape handles of a substrate under construction.
#[derive(Clone, Debug)]
pub struct SubstrateVars {
    pub e: Var,
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Lcp {
    pub kernels: Vec<ParamId>,
    pub mix: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Dora {
    pub cfg: DoraConfig,
    pub lcp: Lcp,
    pub gru: GruCell,
    pub beta: ParamId,
    pub level_norms: Vec<LayerNorm>,
}

impl Dora {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DoraConfig, d: usize, layers: usize) -> Result<Self> {
        cfg.validate(layers)?;
        let kernels = cfg
            .kernel_sizes
            .iter()
            .map(|&k| store.add(format!("dora.lcp.kernel{k}"), uniform(rng, &[k, d], 1.0 / (k as f64).sqrt())))
            .collect::<Result<_>>()?;
        let lcp = Lcp {
            kernels,
            mix: Linear::new(store, rng, "dora.lcp.mix", cfg.kernel_sizes.len() * d, d)?,
            norm: LayerNorm::new(store, "dora.lcp.norm", d)?,
        };
        let gru = GruCell::new(store, rng, "dora.gru", d, d)?;
        let beta = store.add("dora.beta", Tensor::vector(vec![cfg.beta_init]))?;
        let level_norms = (0..cfg.k).map(|u| LayerNorm::new(store, &format!("dora.level{u}.norm"), d)).collect::<Result<_>>()?;
        Ok(Self { cfg, lcp, gru, beta, level_norms })
    }

    /// `E = LN(concat_k(conv_k(H_L)) W_c + H_L)`.
    pub fn lcp_refine(&self, tape: &mut Tape, store: &ParamStore, h_last: Var) -> Result<Var> {
        let branches = self
            .lcp
            .kernels
            .iter()
            .map(|&k| {
                let kv = tape.param(store, k);
                tape.depthwise_conv1d(h_last, kv)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = if branches.len() == 1 { branches[0] } else { tape.concat_cols(&branches)? };
        let mixed = self.lcp.mix.forward(tape, store, cat)?;
        let res = tape.add(mixed, h_last)?;
        self.lcp.norm.forward(tape, store, res)
    }

    /// Levels `u = 1..K`, inputs permuted by the configured layer order.
    pub fn depth_gru(&self, tape: &mut Tape, store: &ParamStore, states: &[Var]) -> Result<Vec<Var>> {
        let inputs: Vec<Var> = self.cfg.selected_layers(states.len())?.into_iter().map(|l| states[l]).collect();
        let mut levels = Vec::with_capacity(inputs.len());
        if !self.cfg.use_depth_gru {
            for (x, norm) in inputs.iter().zip(&self.level_norms) {
                levels.push(norm.forward(tape, store, *x)?);
            }
            return Ok(levels);
        }
        let beta = tape.param(store, self.beta);
        let mut s = inputs[0];
        let first = tape.mul_scalar(s, beta)?;
        let first = tape.add(first, inputs[0])?;
        levels.push(self.level_norms[0].forward(tape, store, first)?);
        for (x, norm) in inputs.iter().zip(&self.level_norms).skip(1) {
            s = self.gru.forward(tape, store, *x, s)?;
            let r = tape.add(s, *x)?;
            levels.push(norm.forward(tape, store, r)?);
        }
        Ok(levels)
    }

    pub fn build(&self, tape: &mut Tape, store: &ParamStore, states: &[Var]) -> Result<SubstrateVars> {
        let last = *states.last().ok_or_else(|| DabsError::Shape("no encoder states".into()))?;
        let e = if self.cfg.use_lcp { self.lcp_refine(tape, store, last)? } else { last };
        let levels = self.depth_gru(tape, store, states)?;
        Ok(SubstrateVars { e, levels })
    }

    /// Eval-mode construction from a precomputed stack.
    pub fn build_substrate(&self, store: &ParamStore, stack: &HiddenStack) -> Result<DepthSubstrate> {
        let mut tape = Tape::inference();
        let states: Vec<Var> = stack.states.iter().map(|s| tape.constant(s.clone())).collect();
        let sub = self.build(&mut tape, store, &states)?;
        Ok(DepthSubstrate {
            e: tape.value(sub.e).clone(),
            levels: sub.levels.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

fn order_flag(order: LayerOrder) -> (f64, f64) {
    match order {
        LayerOrder::Normal => (0.0, 0.0),
        LayerOrder::Reversed => (1.0, 0.0),
        LayerOrder::Shuffled { seed } => (2.0, seed as f64),
    }
}

/// Writes a substrate; header record holds `(n, d, K, order flag, seed lo, seed hi)`.
pub fn save_substrate(sub: &DepthSubstrate, order: LayerOrder, path: &Path) -> Result<()> {
    let (flag, seed) = order_flag(order);
    let seed = seed as u64;
    if seed >= 1 << 48 {
        return Err(DabsError::Config("shuffle seeds above 2^48 cannot be stored in a substrate file".into()));
    }
    // records are f32, so the seed goes in as two 24-bit halves
    let header = Tensor::vector(vec![
        sub.n() as f64,
        sub.e.cols() as f64,
        sub.k() as f64,
        flag,
        (seed & 0xFF_FFFF) as f64,
        (seed >> 24) as f64,
    ]);
    let names: Vec<String> = (0..sub.k()).map(|u| format!("level.{u}")).collect();
    let mut records = vec![("__header__", &header), ("e", &sub.e)];
    records.extend(names.iter().map(String::as_str).zip(&sub.levels));
    write_records(path, records)
}

pub fn load_substrate(path: &Path) -> Result<(DepthSubstrate, LayerOrder)> {
    let bad = |m: String| DabsError::Format { offset: 0, message: m };
    let recs = read_records(path)?;
    if recs.len() < 3 || recs[0].name != "__header__" || recs[0].value.numel() != 6 || recs[1].name != "e" {
        return Err(bad("substrate file must start with a header and `e` record".into()));
    }
    let h = recs[0].value.data();
    let (n, d, k) = (h[0] as usize, h[1] as usize, h[2] as usize);
    let seed = h[4] as u64 | ((h[5] as u64) << 24);
    let order = match h[3] as u8 {
        0 => LayerOrder::Normal,
        1 => LayerOrder::Reversed,
        2 => LayerOrder::Shuffled { seed },
        f => return Err(bad(format!("unknown layer-order flag {f}"))),
    };
    if recs.len() != k + 2 {
        return Err(bad(format!("header declares K={k}, file holds {} levels", recs.len() - 2)));
    }
    for r in &recs[1..] {
        if r.value.shape() != [n, d] {
            return Err(bad(format!("record `{}` has shape {:?}, header says {n} x {d}", r.name, r.value.shape())));
        }
    }
    let sub = DepthSubstrate { e: recs[1].value.clone(), levels: recs[2..].iter().map(|r| r.value.clone()).collect() };
    Ok((sub, order))
}
