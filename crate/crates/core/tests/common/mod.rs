//! Fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use dabs_core::acbs::AcbsConfig;
use dabs_core::corpus::{encode_corpus, generate, split, GenSpec, PhenomenonMix};
use dabs_core::dora::DoraConfig;
use dabs_core::encoder::EncoderConfig;
use dabs_core::objectives::{train, AdamWConfig};
use dabs_core::{DabsModel, Example, Label, LossWeights, ModelConfig, Result, Sentence, TrainConfig, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { vocab_size, d: 8, layers: 4, heads: 2, ffn_mult: 2, max_len: 64, dropout: 0.1 },
        dora: DoraConfig { k: 3, ..Default::default() },
        acbs: AcbsConfig { heads: 2, ..Default::default() },
        seed,
    }
}

pub struct Data {
    pub vocab: Vocab,
    pub train_sentences: Vec<Sentence>,
    pub test_sentences: Vec<Sentence>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare(corpus: &[Sentence], test_fraction: f64, split_seed: u64) -> Result<Data> {
    let (train_sentences, test_sentences) = split(corpus, test_fraction, split_seed)?;
    let vocab = Vocab::build(&train_sentences, 1);
    Ok(Data {
        train: encode_corpus(&train_sentences, &vocab),
        test: encode_corpus(&test_sentences, &vocab),
        vocab,
        train_sentences,
        test_sentences,
    })
}

pub fn toy_corpus(n: usize, seed: u64) -> Result<Vec<Sentence>> {
    generate(&GenSpec {
        n_sentences: n,
        mix: PhenomenonMix { plain: 0.5, negation: 0.3, contrast: 0.1, conflict: 0.1 },
        seed,
        ..Default::default()
    })
}

fn short_train(seed: u64, loss: LossWeights, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        optimizer: AdamWConfig { lr: 1e-2, ..Default::default() },
        seed,
        loss,
        ..Default::default()
    }
}

/// Gate statistics after training with a dominant span-mask penalty.
#[derive(Debug)]
pub struct SpanSuppression {
    /// Mean over aspects of the average gate inside the span.
    pub on_span: f64,
    /// Same, outside the span.
    pub off_span: f64,
}

pub fn span_suppression(lambda_m: f64, seed: u64) -> Result<SpanSuppression> {
    let data = prepare(&toy_corpus(160, seed)?, 0.25, seed)?;
    let loss = LossWeights { lambda_s: 0.0, lambda_m, lambda_ent: 0.0, ..Default::default() };
    let mut model = DabsModel::new(small_config(data.vocab.len(), seed))?;
    train(&mut model, &data.train, &data.test, &short_train(seed, loss, 6))?;
    let (mut on, mut off, mut n_off) = (0.0, 0.0, 0usize);
    let mut n = 0usize;
    for ex in &data.test {
        let traces = model.predict_shared(&ex.ids, &ex.spans(), None)?;
        for (tr, &(span, _)) in traces.iter().zip(&ex.aspects) {
            let (mut s_on, mut c_on, mut s_off, mut c_off) = (0.0, 0, 0.0, 0);
            for (t, &w) in tr.w.iter().enumerate() {
                if span.contains(t + 1) {
                    s_on += w;
                    c_on += 1;
                } else {
                    s_off += w;
                    c_off += 1;
                }
            }
            on += s_on / c_on as f64;
            if c_off > 0 {
                off += s_off / c_off as f64;
                n_off += 1;
            }
            n += 1;
        }
    }
    Ok(SpanSuppression { on_span: on / n as f64, off_span: off / n_off.max(1) as f64 })
}

/// Largest `|g_i - 1/3|` over test aspects after training on shuffled
/// labels with a dominant gate-entropy weight.
pub fn fusion_uniformity(lambda_ent: f64, seed: u64) -> Result<f64> {
    let mut corpus = toy_corpus(160, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for s in &mut corpus {
        for a in &mut s.aspects {
            a.label = Label::from_index(rng.gen_range(0..3))?;
        }
    }
    let data = prepare(&corpus, 0.25, seed)?;
    let loss = LossWeights { lambda_s: 0.0, lambda_m: 0.0, lambda_ent, ..Default::default() };
    let mut model = DabsModel::new(small_config(data.vocab.len(), seed))?;
    train(&mut model, &data.train, &data.test, &short_train(seed, loss, 6))?;
    let mut worst: f64 = 0.0;
    for ex in &data.test {
        for tr in model.predict_shared(&ex.ids, &ex.spans(), None)? {
            for g in tr.g {
                worst = worst.max((g - 1.0 / 3.0).abs());
            }
        }
    }
    Ok(worst)
}
