use serde::{Deserialize, Serialize};

use super::Sentence;
use crate::error::{DabsError, Result};

/// Sentence-level aspect multiplicity and aspect-level class counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_aspects: usize,
    pub avg_m: f64,
    pub p_m1: f64,
    pub p_m_gt1: f64,
    pub p_m2: f64,
    pub p_m_gt2: f64,
    /// Counts in label order (positive, neutral, negative).
    pub class_counts: [usize; 3],
}

pub fn stats(corpus: &[Sentence]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(DabsError::Input("stats over an empty corpus".into()));
    }
    let n = corpus.len();
    let (mut m1, mut m2, mut gt2, mut total) = (0usize, 0usize, 0usize, 0usize);
    let mut class_counts = [0usize; 3];
    for s in corpus {
        let m = s.aspects.len();
        total += m;
        match m {
            0 | 1 => m1 += 1,
            2 => m2 += 1,
            _ => gt2 += 1,
        }
        for a in &s.aspects {
            class_counts[a.label.index()] += 1;
        }
    }
    let frac = |c: usize| c as f64 / n as f64;
    Ok(CorpusStats {
        n_sentences: n,
        n_aspects: total,
        avg_m: total as f64 / n as f64,
        p_m1: frac(m1),
        p_m_gt1: frac(m2 + gt2),
        p_m2: frac(m2),
        p_m_gt2: frac(gt2),
        class_counts,
    })
}
