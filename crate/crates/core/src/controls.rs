//! Inference-time depth probes, negation depth shift, stress splits and the
//! layer-order harness.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acbs::{DepthMask, Label, SelectionTrace};
use crate::corpus::{Example, Sentence};
use crate::dora::LayerOrder;
use crate::error::{DabsError, Result};
use crate::model::{DabsModel, ModelConfig, SentenceState};
use crate::objectives::{evaluate, evaluate_model, train, EvalReport, TrainConfig};

/// Whole-token negation cues; `n't` is additionally matched as a suffix.
pub const NEGATION_CUES: [&str; 4] = ["no", "not", "never", "without"];

pub fn has_negation_cue<S: AsRef<str>>(tokens: &[S]) -> bool {
    tokens.iter().any(|t| {
        let t = t.as_ref().to_lowercase();
        NEGATION_CUES.contains(&t.as_str()) || t.ends_with("n't")
    })
}

/// Three contiguous depth bands over the substrate levels (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBands {
    pub shallow: Vec<usize>,
    pub middle: Vec<usize>,
    pub deep: Vec<usize>,
}

impl RegionBands {
    pub const NAMES: [&'static str; 3] = ["shallow", "middle", "deep"];

    /// Equal thirds; `k` must be a positive multiple of 3.
    pub fn standard(k: usize) -> Result<Self> {
        if k == 0 || k % 3 != 0 {
            return Err(DabsError::Config(format!("no standard region bands for K = {k}; supply bands explicitly")));
        }
        let w = k / 3;
        Ok(Self { shallow: (0..w).collect(), middle: (w..2 * w).collect(), deep: (2 * w..k).collect() })
    }

    pub fn bands(&self) -> [&[usize]; 3] {
        [&self.shallow, &self.middle, &self.deep]
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for band in self.bands() {
            if band.is_empty() {
                return Err(DabsError::Config("empty region band".into()));
            }
            for &u in band {
                if u >= k || seen[u] {
                    return Err(DabsError::Config(format!("region bands do not partition 0..{k} (level {u})")));
                }
                seen[u] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DabsError::Config(format!("region bands do not cover 0..{k}")));
        }
        Ok(())
    }
}

/// Eval-mode shared state of every sentence, so that masks only rerun reads.
pub fn prepare_states(model: &DabsModel, examples: &[Example]) -> Result<Vec<SentenceState>> {
    examples.iter().map(|e| model.prepare(&e.ids)).collect()
}

pub fn masked_report(
    model: &DabsModel,
    examples: &[Example],
    states: &[SentenceState],
    mask: Option<&DepthMask>,
) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for (ex, st) in examples.iter().zip(states) {
        for &(span, gold) in &ex.aspects {
            preds.push(model.read(st, span, mask)?.prediction);
            golds.push(gold);
        }
    }
    evaluate(&preds, &golds)
}

fn require_depth(model: &DabsModel) -> Result<usize> {
    if model.cfg.acbs.readout != crate::acbs::Readout::Selective {
        return Err(DabsError::Config("depth probes need a selective readout".into()));
    }
    Ok(model.cfg.dora.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSweep {
    pub base_mf1: f64,
    /// Macro-F1 per band in shallow, middle, deep order.
    pub band_mf1: [f64; 3],
    pub delta: f64,
    pub best: String,
}

pub fn region_sweep(model: &DabsModel, examples: &[Example], bands: &RegionBands) -> Result<RegionSweep> {
    let k = require_depth(model)?;
    bands.validate(k)?;
    let states = prepare_states(model, examples)?;
    let base_mf1 = masked_report(model, examples, &states, None)?.macro_f1;
    let mut band_mf1 = [0.0; 3];
    for (i, band) in bands.bands().into_iter().enumerate() {
        let mask = DepthMask::new(band.to_vec(), k)?;
        band_mf1[i] = masked_report(model, examples, &states, Some(&mask))?.macro_f1;
    }
    let (best, worst) = extremes(&band_mf1);
    Ok(RegionSweep { base_mf1, band_mf1, delta: band_mf1[best] - band_mf1[worst], best: RegionBands::NAMES[best].into() })
}

/// Indices of the first maximum and first minimum.
fn extremes(v: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut worst = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
        if x < v[worst] {
            worst = i;
        }
    }
    (best, worst)
}

pub fn write_region_csv<W: Write>(mut out: W, rows: &[(String, RegionSweep)]) -> Result<()> {
    writeln!(out, "config,base_mf1,shallow_mf1,middle_mf1,deep_mf1,delta,best_region")?;
    for (name, r) in rows {
        writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.base_mf1, r.band_mf1[0], r.band_mf1[1], r.band_mf1[2], r.delta, r.best
        )?;
    }
    Ok(())
}

/// Keeping one level at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleLayerControls {
    pub level_mf1: Vec<f64>,
    /// 1-based levels.
    pub best_level: usize,
    pub worst_level: usize,
    pub delta: f64,
}

pub fn single_layer_controls(model: &DabsModel, examples: &[Example], states: &[SentenceState]) -> Result<SingleLayerControls> {
    let k = require_depth(model)?;
    let level_mf1 = (0..k)
        .map(|u| Ok(masked_report(model, examples, states, Some(&DepthMask::new(vec![u], k)?))?.macro_f1))
        .collect::<Result<Vec<_>>>()?;
    let (b, w) = extremes(&level_mf1);
    Ok(SingleLayerControls { delta: level_mf1[b] - level_mf1[w], best_level: b + 1, worst_level: w + 1, level_mf1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rand2l {
    /// 0-based first level of each sampled band and its macro-F1.
    pub trials: Vec<(usize, f64)>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

/// Each trial keeps a uniformly drawn contiguous pair of levels.
pub fn rand2l_trials(
    model: &DabsModel,
    examples: &[Example],
    states: &[SentenceState],
    trials: usize,
    seed: u64,
) -> Result<Rand2l> {
    let k = require_depth(model)?;
    if k < 2 {
        return Err(DabsError::Config(format!("Rand-2L needs K >= 2, got {k}")));
    }
    if trials == 0 {
        return Err(DabsError::Config("Rand-2L needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = rng.gen_range(0..k - 1);
        let mask = DepthMask::new(vec![start, start + 1], k)?;
        out.push((start, masked_report(model, examples, states, Some(&mask))?.macro_f1));
    }
    let n = out.len() as f64;
    let mean = out.iter().map(|t| t.1).sum::<f64>() / n;
    let std = if out.len() > 1 { (out.iter().map(|t| (t.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(Rand2l { trials: out, mean, std })
}

/// Band-level depth mass (percentage points) for aspects in sentences with
/// and without a negation cue. Means are over aspect instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationShift {
    pub negated: [f64; 3],
    pub plain: [f64; 3],
    /// `negated - plain` per band.
    pub delta: [f64; 3],
    pub n_negated: usize,
    pub n_plain: usize,
    pub insufficient_data: bool,
}

pub fn negation_shift<S: AsRef<str>>(items: &[(&[S], &SelectionTrace)], bands: &RegionBands) -> Result<NegationShift> {
    let mut sums = [[0.0; 3]; 2];
    let mut counts = [0usize; 2];
    for (tokens, tr) in items {
        let k = tr.alpha.len();
        bands.validate(k)?;
        let g = usize::from(has_negation_cue(tokens));
        counts[g] += 1;
        for (b, band) in bands.bands().into_iter().enumerate() {
            sums[g][b] += 100.0 * band.iter().map(|&u| tr.alpha[u]).sum::<f64>();
        }
    }
    let mean = |g: usize| {
        let mut m = [0.0; 3];
        if counts[g] > 0 {
            for b in 0..3 {
                m[b] = sums[g][b] / counts[g] as f64;
            }
        }
        m
    };
    let (plain, negated) = (mean(0), mean(1));
    let insufficient = counts.iter().any(|&c| c == 0);
    let delta = if insufficient { [0.0; 3] } else { [0, 1, 2].map(|b| negated[b] - plain[b]) };
    Ok(NegationShift { negated, plain, delta, n_negated: counts[1], n_plain: counts[0], insufficient_data: insufficient })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressParams {
    /// Length percentile for the long split.
    pub percentile: f64,
    /// Negation split keeps sentences strictly longer than this.
    pub negation_min_len: usize,
}

impl Default for StressParams {
    fn default() -> Self {
        Self { percentile: 0.9, negation_min_len: 40 }
    }
}

/// Sentence indices of each split; splits may overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressSplits {
    pub long_threshold: usize,
    pub long: Vec<usize>,
    pub conflict: Vec<usize>,
    pub negation: Vec<usize>,
}

/// Length at rank `floor(p * N) + 1` (capped at `N`) of the ascending
/// lengths.
pub fn length_percentile(lengths: &[usize], p: f64) -> Option<usize> {
    if lengths.is_empty() {
        return None;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = ((p * sorted.len() as f64).floor() as usize + 1).min(sorted.len());
    Some(sorted[rank - 1])
}

pub fn build_stress_splits(corpus: &[Sentence], params: &StressParams) -> Result<StressSplits> {
    if !(0.0..=1.0).contains(&params.percentile) {
        return Err(DabsError::Config(format!("percentile {} outside [0, 1]", params.percentile)));
    }
    let lengths: Vec<usize> = corpus.iter().map(|s| s.tokens.len()).collect();
    let long_threshold = length_percentile(&lengths, params.percentile).unwrap_or(0);
    let mut splits = StressSplits { long_threshold, long: Vec::new(), conflict: Vec::new(), negation: Vec::new() };
    for (i, s) in corpus.iter().enumerate() {
        if s.tokens.len() >= long_threshold {
            splits.long.push(i);
        }
        let has = |l: Label| s.aspects.iter().any(|a| a.label == l);
        if has(Label::Positive) && has(Label::Negative) {
            splits.conflict.push(i);
        }
        if s.tokens.len() > params.negation_min_len && has_negation_cue(&s.tokens) {
            splits.negation.push(i);
        }
    }
    Ok(splits)
}

pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// One training run of the layer-order harness.
#[derive(Clone, Debug)]
pub struct OrderRun {
    pub order: LayerOrder,
    pub seed: u64,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// Best-epoch report on the test set.
    pub test: EvalReport,
    /// Report of the restored best model on the probe set.
    pub probe: EvalReport,
}

/// Trains one model per (seed, order) with otherwise identical
/// configuration and evaluates each on `probe_set`.
pub fn layer_order_harness(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    orders: &[LayerOrder],
    seeds: &[u64],
    train_set: &[Example],
    test_set: &[Example],
    probe_set: &[Example],
) -> Result<Vec<OrderRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &order in orders {
            let mut mc = base.clone();
            mc.dora.layer_order = order;
            mc.seed = seed;
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            let mut model = DabsModel::new(mc.clone())?;
            let out = train(&mut model, train_set, test_set, &tc)?;
            let probe = evaluate_model(&model, probe_set, &tc.loss)?.report;
            runs.push(OrderRun { order, seed, model_cfg: mc, train_cfg: tc, test: out.best, probe });
        }
    }
    Ok(runs)
}
