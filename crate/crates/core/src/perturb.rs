//! Controlled textual corruption of lookback windows.
//!
//! A fraction `rho` of the `L` lookback texts, exactly `floor(rho * L)`
//! positions, is corrupted with one of three strategies. All randomness is
//! drawn from streams keyed by `(seed, window, position)`, so the result at a
//! given position does not depend on iteration order or on `L`.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::normalize_token;
use crate::error::{Error, Result};
use crate::rng::{self, derive_key, Stream};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");
const DEFAULT_RULES: &str = include_str!("../data/contradiction_rules.tsv");
const DEFAULT_TEMPLATES: &str = include_str!("../data/negation_templates.txt");

/// Fraction of tokens that sets the number of inserted phrases.
const INSERT_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    InsertIrrelevant,
    ShuffleTokens,
    InjectContradiction,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::InsertIrrelevant,
        Strategy::ShuffleTokens,
        Strategy::InjectContradiction,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContradictionRules {
    /// `(trigger, replacement)`, matched on normalized tokens.
    pub replacements: Vec<(String, String)>,
    /// Sentences appended when no trigger matches.
    pub templates: Vec<String>,
}

impl ContradictionRules {
    pub fn parse(rules: &str, templates: &str) -> Result<Self> {
        let mut replacements = Vec::new();
        for (i, line) in rules.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("rule line {}: expected trigger<TAB>replacement", i + 1)))?;
            let trigger = normalize_token(a)
                .ok_or_else(|| Error::Format(format!("rule line {}: empty trigger", i + 1)))?;
            let replacement = b.trim().to_owned();
            if replacement.is_empty() || normalize_token(&replacement).as_deref() == Some(&trigger) {
                return Err(Error::Format(format!(
                    "rule line {}: replacement must differ from trigger",
                    i + 1
                )));
            }
            replacements.push((trigger, replacement));
        }
        Ok(ContradictionRules {
            replacements,
            templates: read_lines(templates),
        })
    }

    pub fn load(rules: impl AsRef<Path>, templates: impl AsRef<Path>) -> Result<Self> {
        let r = fs::read_to_string(rules.as_ref()).map_err(|e| Error::io(rules.as_ref(), e))?;
        let t =
            fs::read_to_string(templates.as_ref()).map_err(|e| Error::io(templates.as_ref(), e))?;
        Self::parse(&r, &t)
    }

    fn replacement_for(&self, token: &str) -> Option<&str> {
        let key = normalize_token(token)?;
        self.replacements
            .iter()
            .find(|(t, _)| *t == key)
            .map(|(_, r)| r.as_str())
    }
}

impl Default for ContradictionRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES, DEFAULT_TEMPLATES).expect("bundled rule table parses")
    }
}

fn read_lines(s: &str) -> Vec<String> {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn default_lexicon() -> Vec<String> {
    read_lines(DEFAULT_LEXICON)
}

/// One phrase per line.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    Ok(read_lines(
        &fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub rho: f64,
    /// Mixing weight per strategy, in [`Strategy::ALL`] order.
    pub weights: [f64; 3],
    pub seed: u64,
    pub lexicon: Vec<String>,
    pub rules: ContradictionRules,
}

impl PerturbationSpec {
    /// Uniform strategy mix with the bundled lexicon and rules.
    pub fn new(rho: f64, seed: u64) -> Self {
        PerturbationSpec {
            rho,
            weights: [1.0 / 3.0; 3],
            seed,
            lexicon: default_lexicon(),
            rules: ContradictionRules::default(),
        }
    }

    pub fn only(mut self, strategy: Strategy) -> Self {
        self.weights = Strategy::ALL.map(|s| if s == strategy { 1.0 } else { 0.0 });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("strategy weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("strategy weights sum to {total}, not 1")));
        }
        if self.weights[0] > 0.0 && self.lexicon.is_empty() {
            return Err(Error::Config("irrelevant-phrase lexicon is empty".into()));
        }
        Ok(())
    }

    /// Number of corrupted positions in a lookback of `lookback` texts.
    pub fn count(&self, lookback: usize) -> usize {
        (self.rho * lookback as f64).floor() as usize
    }

    fn pick_strategy(&self, window: u64, position: u64) -> Strategy {
        let mut r = rng::keyed(self.seed, Stream::Strategy, &[window, position]);
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (s, w) in Strategy::ALL.iter().zip(self.weights) {
            acc += w;
            if u < acc && w > 0.0 {
                return *s;
            }
        }
        // u landed in the rounding slack above the cumulative sum
        *Strategy::ALL
            .iter()
            .zip(self.weights)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(s, _)| s)
            .expect("weights sum to 1")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub window: u64,
    pub position: usize,
    pub strategy: Strategy,
    pub original: String,
    pub perturbed: String,
}

/// `floor(rho * lookback)` distinct positions in increasing order.
pub fn select_positions(lookback: usize, rho: f64, seed: u64, window: u64) -> Vec<usize> {
    let k = ((rho * lookback as f64).floor() as usize).min(lookback);
    if k == 0 {
        return Vec::new();
    }
    let mut r = rng::keyed(seed, Stream::SelectPositions, &[window]);
    let mut picked = index::sample(&mut r, lookback, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniform permutation of the whitespace tokens. Texts with fewer than two
/// tokens come back unchanged.
pub fn shuffle_tokens(text: &str, seed: u64) -> String {
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 2 {
        return text.to_owned();
    }
    let mut r = rng::keyed(seed, Stream::Shuffle, &[]);
    for i in (1..tokens.len()).rev() {
        tokens.swap(i, rng::index(&mut r, i + 1));
    }
    tokens.join(" ")
}

/// Inserts `max(1, floor(0.3 * tokens))` lexicon phrases at random token
/// boundaries.
pub fn insert_irrelevant(text: &str, seed: u64, lexicon: &[String]) -> Result<String> {
    if lexicon.is_empty() {
        return Err(Error::Config("irrelevant-phrase lexicon is empty".into()));
    }
    let mut pieces: Vec<&str> = text.split_whitespace().collect();
    let k = ((INSERT_FRACTION * pieces.len() as f64).floor() as usize).max(1);
    let mut r = rng::keyed(seed, Stream::Insert, &[]);
    for _ in 0..k {
        let phrase = lexicon[rng::index(&mut r, lexicon.len())].as_str();
        let at = rng::index(&mut r, pieces.len() + 1);
        pieces.insert(at, phrase);
    }
    Ok(pieces.join(" "))
}

/// Replaces one trigger token by its antonym, or appends a negation
/// sentence when nothing matches. Empty texts are left alone.
pub fn inject_contradiction(text: &str, seed: u64, rules: &ContradictionRules) -> String {
    if text.is_empty() {
        return String::new();
    }
    let mut tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    let matches: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| rules.replacement_for(t).is_some())
        .map(|(i, _)| i)
        .collect();
    let mut r = rng::keyed(seed, Stream::Contradiction, &[]);
    if !matches.is_empty() {
        let at = matches[rng::index(&mut r, matches.len())];
        let tok = &tokens[at];
        let replacement = rules.replacement_for(tok).expect("matched above");
        let punct = |c: char| c.is_ascii_punctuation();
        let start = tok.len() - tok.trim_start_matches(punct).len();
        let core = tok.trim_matches(punct);
        let end = start + core.len();
        let mut rep = replacement.to_owned();
        if core.chars().next().is_some_and(char::is_uppercase) {
            let mut cs = rep.chars();
            rep = cs
                .next()
                .map(|c| c.to_uppercase().chain(cs).collect())
                .unwrap_or_default();
        }
        tokens[at] = format!("{}{}{}", &tok[..start], rep, &tok[end..]);
        return tokens.join(" ");
    }
    let template = if rules.templates.is_empty() {
        "the opposite is reported."
    } else {
        rules.templates[rng::index(&mut r, rules.templates.len())].as_str()
    };
    if tokens.is_empty() {
        template.to_owned()
    } else {
        format!("{} {}", tokens.join(" "), template)
    }
}

/// Corrupts `floor(rho * L)` of the texts of window `window`. Unselected
/// positions are copied byte for byte.
pub fn perturb_window(
    texts: &[String],
    spec: &PerturbationSpec,
    window: u64,
) -> Result<(Vec<String>, Vec<PerturbationRecord>)> {
    spec.validate()?;
    let mut out = texts.to_vec();
    let mut records = Vec::new();
    for pos in select_positions(texts.len(), spec.rho, spec.seed, window) {
        let strategy = spec.pick_strategy(window, pos as u64);
        let original = &texts[pos];
        let perturbed = match strategy {
            Strategy::ShuffleTokens => shuffle_tokens(
                original,
                derive_key(spec.seed, Stream::Shuffle, &[window, pos as u64]),
            ),
            Strategy::InsertIrrelevant => insert_irrelevant(
                original,
                derive_key(spec.seed, Stream::Insert, &[window, pos as u64]),
                &spec.lexicon,
            )?,
            Strategy::InjectContradiction => inject_contradiction(
                original,
                derive_key(spec.seed, Stream::Contradiction, &[window, pos as u64]),
                &spec.rules,
            ),
        };
        records.push(PerturbationRecord {
            window,
            position: pos,
            strategy,
            original: original.clone(),
            perturbed: perturbed.clone(),
        });
        out[pos] = perturbed;
    }
    Ok((out, records))
}

/// Writes records as JSON Lines.
pub fn write_audit_log(path: impl AsRef<Path>, records: &[PerturbationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
