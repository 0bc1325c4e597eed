//! Encoder, substrate builder and readout wired into one model, plus the
//! component presets and ablation switches used by the experiment recipes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acbs::{trace_from, Acbs, AcbsConfig, DepthMask, ReadVars, Readout, SelectionTrace, Span};
use crate::dora::{DepthSubstrate, Dora, DoraConfig, SubstrateVars};
use crate::encoder::{Encoder, EncoderConfig, HiddenStack};
use crate::error::{DabsError, Result};
use crate::numerics::checkpoint::{read_records, write_records};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dora: DoraConfig,
    pub acbs: AcbsConfig,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dora.validate(self.encoder.layers)?;
        self.acbs.validate()?;
        if self.encoder.d % self.acbs.heads != 0 {
            return Err(DabsError::Config(format!(
                "width {} is not divisible by {} readout heads",
                self.encoder.d, self.acbs.heads
            )));
        }
        Ok(())
    }
}

/// Component configurations compared against each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    EncoderOnly,
    DoraOnly,
    AcbsOnly,
    Full,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::EncoderOnly, Component::DoraOnly, Component::AcbsOnly, Component::Full];

    pub fn label(self) -> &'static str {
        match self {
            Component::EncoderOnly => "Encoder-only",
            Component::DoraOnly => "DORA-only",
            Component::AcbsOnly => "ACBS-only",
            Component::Full => "Full",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (dora, acbs) = match self {
            Component::EncoderOnly => (false, false),
            Component::DoraOnly => (true, false),
            Component::AcbsOnly => (false, true),
            Component::Full => (true, true),
        };
        cfg.dora.use_lcp = dora;
        cfg.dora.use_depth_gru = dora;
        cfg.acbs.use_token_sel = acbs;
        cfg.acbs.use_layer_sel = acbs;
        cfg.acbs.use_gated_fusion = acbs;
        cfg.acbs.readout = if self == Component::EncoderOnly { Readout::AspectOnly } else { Readout::Selective };
    }
}

/// Single-component removals from the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    TokenSel,
    LayerSel,
    GatedFusion,
    DepthGru,
    Lcp,
    Sparsity,
    SpanMask,
    GateEntropy,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::TokenSel,
        Ablation::LayerSel,
        Ablation::GatedFusion,
        Ablation::DepthGru,
        Ablation::Lcp,
        Ablation::Sparsity,
        Ablation::SpanMask,
        Ablation::GateEntropy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::TokenSel => "- Token Sel.",
            Ablation::LayerSel => "- Layer Sel.",
            Ablation::GatedFusion => "- Gated Fusion",
            Ablation::DepthGru => "- DepthGRU",
            Ablation::Lcp => "- LCP (Pooling)",
            Ablation::Sparsity => "- Sparsity",
            Ablation::SpanMask => "- Span Masking",
            Ablation::GateEntropy => "- Gate Entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "token_sel" => Ablation::TokenSel,
            "layer_sel" => Ablation::LayerSel,
            "gated_fusion" => Ablation::GatedFusion,
            "depth_gru" => Ablation::DepthGru,
            "lcp" => Ablation::Lcp,
            "sparsity" | "r_sparse" => Ablation::Sparsity,
            "span_mask" | "r_mask" => Ablation::SpanMask,
            "gate_entropy" | "r_gate" => Ablation::GateEntropy,
            other => return Err(DabsError::Config(format!("unknown ablation `{other}`"))),
        })
    }

    pub fn apply(self, cfg: &mut ModelConfig, weights: &mut LossWeights) {
        match self {
            Ablation::TokenSel => cfg.acbs.use_token_sel = false,
            Ablation::LayerSel => cfg.acbs.use_layer_sel = false,
            Ablation::GatedFusion => cfg.acbs.use_gated_fusion = false,
            Ablation::DepthGru => cfg.dora.use_depth_gru = false,
            Ablation::Lcp => cfg.dora.use_lcp = false,
            Ablation::Sparsity => weights.lambda_s = 0.0,
            Ablation::SpanMask => weights.lambda_m = 0.0,
            Ablation::GateEntropy => weights.lambda_ent = 0.0,
        }
    }
}

/// Everything a sentence contributes that is shared by its aspects.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceState {
    pub substrate: DepthSubstrate,
    pub context: Tensor,
}

#[derive(Clone, Debug)]
pub struct DabsModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub dora: Dora,
    pub acbs: Acbs,
}

impl DabsModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::new(&mut store, &mut rng, cfg.encoder.clone())?;
        let dora = Dora::new(&mut store, &mut rng, cfg.dora.clone(), cfg.encoder.d, cfg.encoder.layers)?;
        let acbs = Acbs::new(&mut store, &mut rng, cfg.acbs.clone(), cfg.encoder.d, cfg.dora.k)?;
        Ok(Self { cfg, store, encoder, dora, acbs })
    }

    fn selective(&self) -> bool {
        self.cfg.acbs.readout == Readout::Selective
    }

    /// Substrate and shared context on a tape. Aspect-only readout needs
    /// neither the depth levels nor the context, so they are skipped.
    pub fn substrate_vars(&self, tape: &mut Tape, states: &[Var]) -> Result<(SubstrateVars, Var)> {
        if !self.selective() {
            let e = *states.last().expect("validated layer count");
            return Ok((SubstrateVars { e, levels: Vec::new() }, e));
        }
        let sub = self.dora.build(tape, &self.store, states)?;
        let ctx = self.acbs.reorganize_context(tape, &self.store, sub.e)?;
        Ok((sub, ctx))
    }

    /// One encoder pass, one substrate, one context, then a read per span.
    pub fn forward_sentence(&self, tape: &mut Tape, tokens: &[usize], spans: &[Span]) -> Result<Vec<ReadVars>> {
        let pass = self.encoder.forward(tape, &self.store, tokens)?;
        let (sub, ctx) = self.substrate_vars(tape, &pass.states)?;
        spans.iter().map(|&s| self.acbs.read(tape, &self.store, &sub, ctx, s, None)).collect()
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<HiddenStack> {
        self.encoder.encode(&self.store, tokens)
    }

    /// Eval-mode shared state for a precomputed stack.
    pub fn prepare_from_stack(&self, stack: &HiddenStack) -> Result<SentenceState> {
        let mut tape = Tape::inference();
        let states: Vec<Var> = stack.states.iter().map(|s| tape.constant(s.clone())).collect();
        let (sub, ctx) = self.substrate_vars(&mut tape, &states)?;
        Ok(SentenceState {
            substrate: DepthSubstrate {
                e: tape.value(sub.e).clone(),
                levels: sub.levels.iter().map(|&v| tape.value(v).clone()).collect(),
            },
            context: tape.value(ctx).clone(),
        })
    }

    pub fn prepare(&self, tokens: &[usize]) -> Result<SentenceState> {
        self.prepare_from_stack(&self.encode(tokens)?)
    }

    pub fn read(&self, state: &SentenceState, span: Span, mask: Option<&DepthMask>) -> Result<SelectionTrace> {
        self.acbs.read_aspect(&self.store, &state.substrate, &state.context, span, mask)
    }

    /// Reuse path: the sentence is prepared once and every aspect reads it.
    pub fn predict_shared(&self, tokens: &[usize], spans: &[Span], mask: Option<&DepthMask>) -> Result<Vec<SelectionTrace>> {
        let state = self.prepare(tokens)?;
        spans.iter().map(|&s| self.read(&state, s, mask)).collect()
    }

    /// Non-reuse path: the whole pipeline reruns from the tokens for one aspect.
    pub fn predict_isolated(&self, tokens: &[usize], span: Span, mask: Option<&DepthMask>) -> Result<SelectionTrace> {
        let state = self.prepare(tokens)?;
        self.read(&state, span, mask)
    }

    /// Single-tape eval forward; traces match [`Self::predict_shared`].
    pub fn predict_on_tape(&self, tokens: &[usize], spans: &[Span]) -> Result<Vec<SelectionTrace>> {
        let mut tape = Tape::inference();
        let reads = self.forward_sentence(&mut tape, tokens, spans)?;
        Ok(reads.iter().map(|r| trace_from(&tape, r, tokens.len())).collect())
    }

    /// Writes `checkpoint.bin` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_records(&dir.join("checkpoint.bin"), self.store.iter().map(|p| (p.name.as_str(), &p.value)))?;
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let mut model = Self::new(cfg)?;
        model.store.load_from(&read_records(&dir.join("checkpoint.bin"))?)?;
        Ok(model)
    }
}
