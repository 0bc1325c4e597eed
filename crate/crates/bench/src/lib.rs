//! Shared fixtures for the criterion benches.

use dabs_core::acbs::AcbsConfig;
use dabs_core::dora::DoraConfig;
use dabs_core::encoder::EncoderConfig;
use dabs_core::{DabsModel, Example, Label, ModelConfig, Span};

pub const VOCAB: usize = 256;

pub fn model(d: usize, layers: usize, k: usize) -> DabsModel {
    let cfg = ModelConfig {
        encoder: EncoderConfig { vocab_size: VOCAB, d, layers, heads: 2, ffn_mult: 2, max_len: 128, dropout: 0.1 },
        dora: DoraConfig { k, ..Default::default() },
        acbs: AcbsConfig { heads: 2, ..Default::default() },
        seed: 11,
    };
    DabsModel::new(cfg).expect("valid bench config")
}

/// Token ids for an `n`-token sentence and `m` single-token spans spread
/// over it.
pub fn sentence(n: usize, m: usize) -> (Vec<usize>, Vec<Span>) {
    let tokens = (0..n).map(|i| 2 + (i * 37 + 11) % (VOCAB - 2)).collect();
    let spans = (0..m).map(|j| {
        let p = 1 + j * n / m.max(1);
        Span::new(p, p)
    });
    (tokens, spans.collect())
}

pub fn examples(count: usize, n: usize, m: usize) -> Vec<Example> {
    (0..count)
        .map(|i| {
            let (mut ids, spans) = sentence(n, m);
            ids.rotate_left(i % n);
            Example {
                id: format!("b{i}"),
                ids,
                words: Vec::new(),
                aspects: spans.into_iter().enumerate().map(|(j, s)| (s, Label::from_index(j % 3).unwrap())).collect(),
            }
        })
        .collect()
}
