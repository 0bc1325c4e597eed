//! Template sentences with known aspect polarities.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Aspect, Sentence};
use crate::acbs::{Label, Span};
use crate::error::{DabsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenomenon {
    Plain,
    Negation,
    Contrast,
    Conflict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenomenonMix {
    pub plain: f64,
    pub negation: f64,
    pub contrast: f64,
    pub conflict: f64,
}

impl PhenomenonMix {
    fn weights(&self) -> [(Phenomenon, f64); 4] {
        [
            (Phenomenon::Plain, self.plain),
            (Phenomenon::Negation, self.negation),
            (Phenomenon::Contrast, self.contrast),
            (Phenomenon::Conflict, self.conflict),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lexicons {
    pub aspects: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
    /// Negated copulas such as "is not" or "wasn't".
    pub negators: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Self {
            aspects: words(&[
                "food", "service", "staff", "pizza", "pasta", "wine list", "dessert", "coffee", "menu", "music",
                "portions", "decor", "waiter", "sushi", "delivery", "battery life", "screen", "keyboard", "price",
                "hard drive", "customer support", "operating system", "speakers", "touchpad",
            ]),
            positive: words(&[
                "great", "delicious", "excellent", "friendly", "fast", "amazing", "superb", "lovely", "fantastic",
                "perfect", "reliable", "impressive",
            ]),
            negative: words(&[
                "terrible", "awful", "slow", "rude", "bland", "horrible", "disappointing", "overpriced", "poor",
                "mediocre", "noisy", "unreliable",
            ]),
            neutral: words(&["average", "standard", "typical", "ordinary", "normal", "basic"]),
            negators: words(&["is not", "was not", "isn't", "wasn't", "is never", "was never"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_sentences: usize,
    /// Probability of M = 1, 2, 3, ... aspects.
    pub m_dist: Vec<f64>,
    pub mix: PhenomenonMix,
    /// Probability that a polar clause in a non-negation sentence is negated.
    pub background_negation: f64,
    pub lexicons: Lexicons,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_sentences: 1000,
            m_dist: vec![0.5, 0.3, 0.2],
            mix: PhenomenonMix { plain: 0.4, negation: 0.3, contrast: 0.1, conflict: 0.2 },
            background_negation: 0.0,
            lexicons: Lexicons::default(),
            seed: 0,
        }
    }
}

fn check_dist(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DabsError::Config(format!("{name} must be nonnegative and sum to 1, got {p:?}")));
    }
    Ok(())
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        check_dist("m_dist", &self.m_dist)?;
        check_dist("phenomenon mix", &self.mix.weights().map(|w| w.1))?;
        let lx = &self.lexicons;
        for (name, list) in [
            ("aspects", &lx.aspects),
            ("positive", &lx.positive),
            ("negative", &lx.negative),
            ("neutral", &lx.neutral),
            ("negators", &lx.negators),
        ] {
            if list.is_empty() {
                return Err(DabsError::Config(format!("lexicon `{name}` is empty")));
            }
        }
        let multi: f64 = self.m_dist.iter().skip(1).sum();
        if (self.mix.contrast > 0.0 || self.mix.conflict > 0.0) && multi == 0.0 {
            return Err(DabsError::Config("contrast and conflict sentences need M >= 2, but m_dist puts all mass on M = 1".into()));
        }
        if lx.aspects.len() < self.m_dist.len() {
            return Err(DabsError::Config(format!(
                "{} aspect terms cannot fill sentences with up to {} distinct aspects",
                lx.aspects.len(),
                self.m_dist.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.background_negation) {
            return Err(DabsError::Config("background_negation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &'a [String]) -> &'a str {
    list.choose(rng).expect("validated nonempty")
}

fn opposite(l: Label) -> Label {
    match l {
        Label::Positive => Label::Negative,
        Label::Negative => Label::Positive,
        Label::Neutral => Label::Neutral,
    }
}

struct Builder {
    tokens: Vec<String>,
    aspects: Vec<Aspect>,
}

impl Builder {
    fn push(&mut self, text: &str) {
        self.tokens.extend(text.split_whitespace().map(str::to_string));
    }

    fn push_aspect(&mut self, term: &str, label: Label) {
        let start = self.tokens.len() + 1;
        self.push(term);
        self.aspects.push(Aspect { term: term.to_string(), span: Span::new(start, self.tokens.len()), label });
    }
}

const INTENSIFIERS: [&str; 4] = ["really", "very", "quite", "pretty"];
const PREFIXES: [&str; 5] = ["honestly ,", "overall ,", "i think", "to be fair ,", "last night"];
const SUFFIXES: [&str; 4] = ["at this place", "for the price", "this time", "today"];

/// One clause stating `label` for `term`, optionally through a negated
/// predicate of the opposite polarity.
fn clause(b: &mut Builder, rng: &mut ChaCha8Rng, lx: &Lexicons, term: &str, label: Label, negate: bool) {
    let predicate_polarity = if negate { opposite(label) } else { label };
    let predicate = match predicate_polarity {
        Label::Positive => pick(rng, &lx.positive),
        Label::Negative => pick(rng, &lx.negative),
        Label::Neutral => pick(rng, &lx.neutral),
    }
    .to_string();
    let form = rng.gen_range(0..4);
    if label == Label::Neutral && !negate && form == 3 {
        // factual mention without an opinion
        b.push(["we ordered the", "we tried the", "i checked the", "they showed us the"][rng.gen_range(0..4)]);
        b.push_aspect(term, label);
        return;
    }
    let intens = if rng.gen_bool(0.3) { Some(INTENSIFIERS[rng.gen_range(0..4)]) } else { None };
    b.push("the");
    b.push_aspect(term, label);
    if negate {
        b.push(pick(rng, &lx.negators));
    } else {
        b.push(if rng.gen_bool(0.5) { "is" } else { "was" });
    }
    if let Some(i) = intens {
        b.push(i);
    }
    b.push(&predicate);
}

/// Generates sentences together with the phenomenon each was built for.
pub fn generate_tagged(spec: &GenSpec) -> Result<Vec<(Sentence, Phenomenon)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lx = &spec.lexicons;
    let mix = spec.mix.weights();
    let mut out = Vec::with_capacity(spec.n_sentences);
    for i in 0..spec.n_sentences {
        let phen = mix[sample_index(&mut rng, &mix.map(|w| w.1))].0;
        let needs_pair = matches!(phen, Phenomenon::Contrast | Phenomenon::Conflict);
        let m = if needs_pair {
            let tail: Vec<f64> = spec.m_dist.iter().skip(1).cloned().collect();
            2 + sample_index(&mut rng, &tail)
        } else {
            1 + sample_index(&mut rng, &spec.m_dist)
        };
        let terms: Vec<&String> = lx.aspects.choose_multiple(&mut rng, m).collect();

        let mut labels: Vec<Label> = (0..m).map(|_| Label::ALL[sample_index(&mut rng, &[0.4, 0.25, 0.35])]).collect();
        match phen {
            Phenomenon::Contrast => {
                labels[0] = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
                labels[1] = opposite(labels[0]);
            }
            Phenomenon::Conflict => {
                let mut slots: Vec<usize> = (0..m).collect();
                slots.shuffle(&mut rng);
                labels[slots[0]] = Label::Positive;
                labels[slots[1]] = Label::Negative;
            }
            Phenomenon::Negation => {
                if labels.iter().all(|&l| l == Label::Neutral) {
                    let k = rng.gen_range(0..m);
                    labels[k] = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
                }
            }
            Phenomenon::Plain => {}
        }
        let negate_p = if phen == Phenomenon::Negation { 0.6 } else { spec.background_negation };
        let mut negated: Vec<bool> = labels.iter().map(|&l| l != Label::Neutral && rng.gen_bool(negate_p)).collect();
        if phen == Phenomenon::Negation && !negated.iter().any(|&n| n) {
            let polar: Vec<usize> = (0..m).filter(|&k| labels[k] != Label::Neutral).collect();
            negated[*polar.choose(&mut rng).expect("at least one polar label")] = true;
        }

        let mut b = Builder { tokens: Vec::new(), aspects: Vec::new() };
        if rng.gen_bool(0.3) {
            b.push(PREFIXES[rng.gen_range(0..PREFIXES.len())]);
        }
        for k in 0..m {
            if k > 0 {
                let joint = match phen {
                    Phenomenon::Contrast if k == 1 => ["but", ", but", "; however ,"][rng.gen_range(0..3)],
                    Phenomenon::Conflict => ["and", ",", "while"][rng.gen_range(0..3)],
                    _ => ["and", ",", "and also"][rng.gen_range(0..3)],
                };
                b.push(joint);
            }
            clause(&mut b, &mut rng, lx, terms[k], labels[k], negated[k]);
        }
        if rng.gen_bool(0.3) {
            b.push(SUFFIXES[rng.gen_range(0..SUFFIXES.len())]);
        }
        let text = b.tokens.join(" ");
        let sentence = Sentence { id: format!("s{i}"), text, tokens: b.tokens, aspects: b.aspects };
        sentence.check()?;
        out.push((sentence, phen));
    }
    Ok(out)
}

pub fn generate(spec: &GenSpec) -> Result<Vec<Sentence>> {
    Ok(generate_tagged(spec)?.into_iter().map(|s| s.0).collect())
}
