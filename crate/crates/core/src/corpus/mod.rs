//! Sentences with aspect annotations: synthetic generation, JSONL ingest,
//! tokenization, vocabulary and multiplicity statistics.

pub mod generate;
pub mod jsonl;
pub mod stats;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acbs::{AspectQuery, Label, Span};
use crate::error::{DabsError, Result};

pub use generate::{generate, generate_tagged, GenSpec, Lexicons, Phenomenon, PhenomenonMix};
pub use jsonl::{export_jsonl, ingest_jsonl, read_jsonl, Ingested, SnapWarning};
pub use stats::{stats, CorpusStats};
pub use vocab::{Vocab, PAD_ID, UNK_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aspect {
    pub term: String,
    pub span: Span,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub aspects: Vec<Aspect>,
}

impl Sentence {
    /// Builds a sentence from text, checking every span against the
    /// whitespace tokens.
    pub fn new(id: impl Into<String>, text: impl Into<String>, aspects: Vec<Aspect>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        let s = Self { id: id.into(), text, tokens, aspects };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        for a in &self.aspects {
            a.span.check(self.tokens.len())?;
            let (lo, hi) = a.span.rows();
            if self.tokens[lo..hi].join(" ") != a.term.to_lowercase() {
                return Err(DabsError::Input(format!(
                    "sentence {}: term `{}` does not match tokens {:?}",
                    self.id,
                    a.term,
                    &self.tokens[lo..hi]
                )));
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> Vec<AspectQuery> {
        self.aspects.iter().map(|a| AspectQuery { span: a.span, label: Some(a.label) }).collect()
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// A sentence mapped to vocabulary ids, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub ids: Vec<usize>,
    pub words: Vec<String>,
    pub aspects: Vec<(Span, Label)>,
}

impl Example {
    pub fn spans(&self) -> Vec<Span> {
        self.aspects.iter().map(|a| a.0).collect()
    }
}

pub fn encode_corpus(corpus: &[Sentence], vocab: &Vocab) -> Vec<Example> {
    corpus
        .iter()
        .map(|s| Example {
            id: s.id.clone(),
            ids: vocab.encode(&s.tokens),
            words: s.tokens.clone(),
            aspects: s.aspects.iter().map(|a| (a.span, a.label)).collect(),
        })
        .collect()
}

/// Seeded shuffle, then the first `test_fraction` of sentences become the
/// test split. Returns `(train, test)`.
pub fn split(corpus: &[Sentence], test_fraction: f64, seed: u64) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DabsError::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (corpus.len() as f64 * test_fraction).round() as usize;
    let test = idx[..n_test].iter().map(|&i| corpus[i].clone()).collect();
    let train = idx[n_test..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, test))
}
