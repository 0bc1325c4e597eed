use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sentence;
use crate::error::{DabsError, Result};

pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Ids 0 and 1 are reserved; remaining tokens are ordered by descending
    /// frequency, ties broken lexicographically.
    pub fn build(corpus: &[Sentence], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = ["<unk>", "<pad>"].into_iter().chain(words.into_iter().map(|w| w.0)).map(String::from).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if tokens.len() < 2 || tokens[UNK_ID] != "<unk>" || tokens[PAD_ID] != "<pad>" {
            return Err(DabsError::Input(format!("{} is not a vocabulary file", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}
