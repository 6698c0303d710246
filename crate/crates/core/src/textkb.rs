//! Concept mention extraction with rule-based negation.
//!
//! Mentions are found by a longest-match scan of a surface-form lexicon and
//! each mention is marked negated when a trigger phrase appears in the six
//! tokens before it without an intervening period. Hedged mentions such as
//! "possible effusion" carry no trigger and therefore count as affirmed.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const NEGATION_WINDOW: usize = 6;

pub const DEFAULT_TRIGGERS: &[&str] = &[
    "no",
    "not",
    "without",
    "free of",
    "absence of",
    "negative for",
    "clear of",
    "resolved",
];

const SENTENCE_BOUNDARY: &str = ".";

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Surface form to concept id, keyed by the whitespace-joined token sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, usize>,
    max_len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, concept_id: usize) -> Result<()> {
        let tokens = tokenize(surface);
        if tokens.is_empty() {
            return Err(Error::Contract(format!("empty surface form {surface:?}")));
        }
        self.max_len = self.max_len.max(tokens.len());
        self.entries.insert(tokens.join(" "), concept_id);
        Ok(())
    }

    pub fn get(&self, surface: &str) -> Option<usize> {
        self.entries.get(&tokenize(surface).join(" ")).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Checks every concept id against a concept count.
    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        match self.entries.iter().find(|(_, &id)| id >= num_concepts) {
            Some((form, id)) => Err(Error::Contract(format!(
                "lexicon entry {form:?} -> {id} exceeds concept count {num_concepts}"
            ))),
            None => Ok(()),
        }
    }

    /// Reads `surface_form <TAB> concept_id` lines. Blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(parse_err(format!(
                    "expected 2 fields, found {}",
                    fields.len()
                )));
            }
            let id = fields[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad concept id {:?}", fields[1])))?;
            lex.insert(fields[0], id)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (form, id) in &self.entries {
            let _ = writeln!(out, "{form}\t{id}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConceptMention {
    pub concept_id: usize,
    pub negated: bool,
    pub span: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Report,
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSet {
    pub mentions: Vec<ConceptMention>,
    pub view: View,
}

impl ConceptSet {
    pub fn empty(view: View) -> Self {
        Self {
            mentions: Vec::new(),
            view,
        }
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    /// The `(concept_id, negated)` pairs, in mention order.
    pub fn keys(&self) -> Vec<(usize, bool)> {
        self.mentions
            .iter()
            .map(|m| (m.concept_id, m.negated))
            .collect()
    }
}

/// True when a trigger lies wholly inside the window of
/// [`NEGATION_WINDOW`] tokens before the mention, with no period between
/// the end of the trigger and the mention.
pub fn detect_negation(
    tokens: &[String],
    mention_span: Range<usize>,
    triggers: &[Vec<String>],
) -> bool {
    let start = mention_span.start.min(tokens.len());
    let window_start = start.saturating_sub(NEGATION_WINDOW);
    for trigger in triggers {
        let len = trigger.len();
        if len == 0 || len > start - window_start {
            continue;
        }
        for pos in window_start..=start - len {
            if tokens[pos..pos + len] != trigger[..] {
                continue;
            }
            if !tokens[pos + len..start]
                .iter()
                .any(|t| t == SENTENCE_BOUNDARY)
            {
                return true;
            }
        }
    }
    false
}

pub fn default_triggers() -> Vec<Vec<String>> {
    DEFAULT_TRIGGERS.iter().map(|t| tokenize(t)).collect()
}

/// Longest-match lexicon scan with a negation verdict per mention.
///
/// Overlapping candidates resolve by length, then earliest start, then lower
/// concept id. Mentions are returned in text order, deduplicated by
/// `(concept_id, negated)` keeping the first occurrence.
pub fn extract_concepts(text: &str, lexicon: &Lexicon, view: View) -> Result<ConceptSet> {
    extract_with_triggers(text, lexicon, view, &default_triggers())
}

pub fn extract_with_triggers(
    text: &str,
    lexicon: &Lexicon,
    view: View,
    triggers: &[Vec<String>],
) -> Result<ConceptSet> {
    if lexicon.is_empty() {
        return Err(Error::Contract(
            "extract_concepts needs a non-empty lexicon".into(),
        ));
    }
    let tokens = tokenize(text);
    let mut candidates = Vec::new();
    for start in 0..tokens.len() {
        for len in 1..=lexicon.max_len.min(tokens.len() - start) {
            let key = tokens[start..start + len].join(" ");
            if let Some(&id) = lexicon.entries.get(&key) {
                candidates.push((start, len, id));
            }
        }
    }
    candidates.sort_by_key(|&(start, len, id)| (std::cmp::Reverse(len), start, id));

    let mut taken = vec![false; tokens.len()];
    let mut accepted = Vec::new();
    for (start, len, id) in candidates {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        accepted.push((start, len, id));
    }
    accepted.sort_unstable();

    let mut seen = HashSet::new();
    let mut mentions = Vec::new();
    for (start, len, id) in accepted {
        let span = start..start + len;
        let negated = detect_negation(&tokens, span.clone(), triggers);
        if seen.insert((id, negated)) {
            mentions.push(ConceptMention {
                concept_id: id,
                negated,
                span,
            });
        }
    }
    Ok(ConceptSet { mentions, view })
}

/// Splits text into sentences on period tokens, keeping the period.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in tokenize(text) {
        let end = tok == SENTENCE_BOUNDARY;
        current.push(tok);
        if end {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}
