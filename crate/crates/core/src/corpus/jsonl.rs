use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Aspect, Sentence};
use crate::acbs::{Label, Span};
use crate::error::{DabsError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAspect {
    from_char: usize,
    to_char: usize,
    term: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSentence {
    id: String,
    text: String,
    aspects: Vec<RawAspect>,
}

/// Recorded when an aspect's character range did not fall on token
/// boundaries and was widened to the covering tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapWarning {
    pub line: usize,
    pub sentence_id: String,
    pub term: String,
    pub from_char: usize,
    pub to_char: usize,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub sentences: Vec<Sentence>,
    pub warnings: Vec<SnapWarning>,
}

/// Byte ranges `[start, end)` of the whitespace tokens.
fn token_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Byte offset of every char boundary, indexed by char position; the last
/// entry is the text length.
fn char_to_byte(text: &str) -> Vec<usize> {
    text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len())).collect()
}

/// Maps `[from, to)` to the covering token interval; `exact` is false when
/// the range had to be widened.
fn align(offsets: &[(usize, usize)], from: usize, to: usize) -> Option<(Span, bool)> {
    let hits: Vec<usize> = offsets.iter().enumerate().filter(|(_, &(s, e))| s < to && from < e).map(|(i, _)| i).collect();
    let (&first, &last) = (hits.first()?, hits.last()?);
    let exact = offsets[first].0 == from && offsets[last].1 == to;
    Some((Span::new(first + 1, last + 1), exact))
}

/// Parses JSONL text: one `{id, text, aspects: [{from_char, to_char, term,
/// label}]}` object per line. Offsets count Unicode scalar values.
pub fn read_jsonl(content: &str) -> Result<Ingested> {
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSentence =
            serde_json::from_str(line).map_err(|e| DabsError::Input(format!("line {lineno}: malformed record: {e}")))?;
        let offsets = token_offsets(&raw.text);
        let bytes = char_to_byte(&raw.text);
        let n_chars = bytes.len() - 1;
        let tokens: Vec<String> = offsets.iter().map(|&(s, e)| raw.text[s..e].to_lowercase()).collect();
        let mut aspects = Vec::new();
        for a in raw.aspects {
            let label: Label = a.label.parse().map_err(|e: DabsError| DabsError::Input(format!("line {lineno}: {e}")))?;
            if a.from_char >= a.to_char || a.to_char > n_chars {
                return Err(DabsError::Input(format!(
                    "line {lineno}: aspect range [{}, {}) invalid for text of {n_chars} characters",
                    a.from_char, a.to_char
                )));
            }
            let (span, exact) = align(&offsets, bytes[a.from_char], bytes[a.to_char])
                .ok_or_else(|| DabsError::Input(format!("line {lineno}: aspect `{}` covers no token", a.term)))?;
            if !exact {
                warnings.push(SnapWarning {
                    line: lineno,
                    sentence_id: raw.id.clone(),
                    term: a.term.clone(),
                    from_char: a.from_char,
                    to_char: a.to_char,
                    span,
                });
            }
            let (lo, hi) = span.rows();
            aspects.push(Aspect { term: tokens[lo..hi].join(" "), span, label });
        }
        sentences.push(Sentence { id: raw.id, text: raw.text, tokens, aspects });
    }
    Ok(Ingested { sentences, warnings })
}

pub fn ingest_jsonl(path: &Path) -> Result<Ingested> {
    read_jsonl(&fs::read_to_string(path)?)
}

/// Writes sentences in the ingest format, character ranges covering each
/// aspect's tokens.
pub fn export_jsonl<W: Write>(mut out: W, corpus: &[Sentence]) -> Result<()> {
    for s in corpus {
        let offsets = token_offsets(&s.text);
        let bytes = char_to_byte(&s.text);
        let char_at = |b: usize| bytes.binary_search(&b).expect("token boundary is a char boundary");
        if offsets.len() != s.tokens.len() {
            return Err(DabsError::Input(format!("sentence {}: text and tokens disagree", s.id)));
        }
        let aspects = s
            .aspects
            .iter()
            .map(|a| {
                let (lo, hi) = a.span.rows();
                let (from, to) = (offsets[lo].0, offsets[hi - 1].1);
                RawAspect { from_char: char_at(from), to_char: char_at(to), term: s.text[from..to].to_string(), label: a.label.to_string() }
            })
            .collect();
        serde_json::to_writer(&mut out, &RawSentence { id: s.id.clone(), text: s.text.clone(), aspects })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
