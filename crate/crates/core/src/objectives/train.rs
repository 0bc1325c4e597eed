use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{instance_loss, sum_scalars, LossWeights};
use super::metrics::{evaluate, EvalReport};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::acbs::{trace_from, Label, SelectionTrace};
use crate::corpus::Example;
use crate::error::{DabsError, Result};
use crate::model::DabsModel;
use crate::numerics::{Grads, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minimum aspect instances per optimizer step; whole sentences are
    /// added until it is reached.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, optimizer: AdamWConfig::default(), clip: 1.0, seed: 0, loss: LossWeights::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DabsError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.clip > 0.0) {
            return Err(DabsError::Config(format!("clip norm must be positive, got {}", self.clip)));
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(DabsError::Config("learning rate must be positive and weight decay nonnegative".into()));
        }
        self.loss.validate()
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub report: EvalReport,
    pub loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    /// 1-based epoch with the highest test macro-F1 (earliest on ties).
    pub best_epoch: usize,
    pub best: EvalReport,
}

/// Predictions, traces and mean objective over a labelled set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub loss: f64,
    pub predictions: Vec<Label>,
    pub golds: Vec<Label>,
    pub traces: Vec<SelectionTrace>,
}

/// Gradient of one batch, summed over sentences.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Grads,
    pub predictions: Vec<Label>,
    pub golds: Vec<Label>,
}

/// Groups sentences (in `order`) into batches of at least `batch_size`
/// aspects. Sentences without aspects are skipped.
pub fn make_batches(examples: &[Example], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut count = 0;
    for &i in order {
        if examples[i].aspects.is_empty() {
            continue;
        }
        cur.push(i);
        count += examples[i].aspects.len();
        if count >= batch_size {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Dropout stream for sentence `idx` of `epoch`.
pub fn dropout_rng(seed: u64, epoch: usize, idx: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | idx as u64);
    r
}

/// Mean objective over the batch's aspect instances and its gradient. Each
/// sentence runs on its own tape; `rng_for(i)` supplies the dropout stream of
/// the `i`-th sentence, `None` meaning dropout off.
pub fn batch_gradients(
    model: &DabsModel,
    batch: &[&Example],
    weights: &LossWeights,
    mut rng_for: impl FnMut(usize) -> Option<ChaCha8Rng>,
) -> Result<BatchResult> {
    let n_aspects: usize = batch.iter().map(|e| e.aspects.len()).sum();
    if n_aspects == 0 {
        return Err(DabsError::Input("batch without aspect instances".into()));
    }
    let mut grads = Grads::zeros_like(&model.store);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(n_aspects);
    let mut golds = Vec::with_capacity(n_aspects);
    for (i, ex) in batch.iter().enumerate() {
        let mut tape = match rng_for(i) {
            Some(r) => Tape::training(r),
            None => Tape::new(),
        };
        let reads = model.forward_sentence(&mut tape, &ex.ids, &ex.spans())?;
        let mut terms = Vec::with_capacity(reads.len());
        for (r, &(span, gold)) in reads.iter().zip(&ex.aspects) {
            terms.push(instance_loss(&mut tape, r, gold, span, weights)?);
            predictions.push(trace_from(&tape, r, ex.ids.len()).prediction);
            golds.push(gold);
        }
        let s = sum_scalars(&mut tape, &terms)?;
        let s = tape.scale(s, 1.0 / n_aspects as f64);
        loss += tape.value(s).item();
        tape.backward(s)?;
        for (id, g) in tape.param_grads() {
            grads.add(id, g);
        }
    }
    Ok(BatchResult { loss, grads, predictions, golds })
}

/// Eval-mode predictions and mean instance loss.
pub fn evaluate_model(model: &DabsModel, examples: &[Example], weights: &LossWeights) -> Result<Evaluation> {
    let mut predictions = Vec::new();
    let mut golds = Vec::new();
    let mut traces = Vec::new();
    let mut loss = 0.0;
    for ex in examples {
        let mut tape = Tape::inference();
        let reads = model.forward_sentence(&mut tape, &ex.ids, &ex.spans())?;
        for (r, &(span, gold)) in reads.iter().zip(&ex.aspects) {
            let l = instance_loss(&mut tape, r, gold, span, weights)?;
            loss += tape.value(l).item();
            let t = trace_from(&tape, r, ex.ids.len());
            predictions.push(t.prediction);
            golds.push(gold);
            traces.push(t);
        }
    }
    let report = evaluate(&predictions, &golds)?;
    let n = golds.len().max(1) as f64;
    Ok(Evaluation { report, loss: loss / n, predictions, golds, traces })
}

/// Trains in place. Each epoch logs a `train` row (metrics from the
/// training-mode forward passes) and a `test` row; the parameters of the
/// best test epoch are restored at the end.
pub fn train(model: &mut DabsModel, train_set: &[Example], test_set: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.iter().all(|e| e.aspects.is_empty()) {
        return Err(DabsError::Input("training corpus has no aspect instances".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(usize, EvalReport, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        let mut sent_idx = 0;
        for batch in make_batches(train_set, &order, cfg.batch_size) {
            let exs: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let base = sent_idx;
            let mut res = batch_gradients(model, &exs, &cfg.loss, |i| Some(dropout_rng(cfg.seed, epoch, base + i)))?;
            sent_idx += exs.len();
            clip_grad_norm(&mut res.grads, cfg.clip);
            opt.step(&mut model.store, &res.grads)?;
            loss_sum += res.loss;
            n_batches += 1;
            preds.extend(res.predictions);
            golds.extend(res.golds);
        }
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            report: evaluate(&preds, &golds)?,
            loss: loss_sum / n_batches as f64,
            seed: cfg.seed,
        });

        let ev = evaluate_model(model, test_set, &cfg.loss)?;
        let improved = best.as_ref().map_or(true, |b| ev.report.macro_f1 > b.1.macro_f1);
        if improved {
            best = Some((epoch, ev.report.clone(), model.store.clone()));
        }
        logs.push(EpochLog { epoch, split: "test".into(), report: ev.report, loss: ev.loss, seed: cfg.seed });
    }
    let (best_epoch, best, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome { logs, best_epoch, best })
}

/// CSV with header `epoch,split,acc,mf1,f1_pos,f1_neu,f1_neg,loss,seed`.
pub fn write_metric_log<W: Write>(mut out: W, logs: &[EpochLog]) -> Result<()> {
    writeln!(out, "epoch,split,acc,mf1,f1_pos,f1_neu,f1_neg,loss,seed")?;
    for l in logs {
        let r = &l.report;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            l.epoch,
            l.split,
            r.accuracy,
            r.macro_f1,
            r.f1[Label::Positive.index()],
            r.f1[Label::Neutral.index()],
            r.f1[Label::Negative.index()],
            l.loss,
            l.seed
        )?;
    }
    Ok(())
}
