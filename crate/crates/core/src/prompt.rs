//! Text prompt constructor: maps templated questions onto declarative
//! sentences, and embeds text into the visual feature space.
//!
//! Patterns mark slots as `<NAME>` (upper-case, digits and `_` allowed).
//! A question matches a template when the whole string matches the pattern
//! with every slot capturing a non-empty span; among several matching
//! templates the one with the most literal characters wins, then registry order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TspmError};
use crate::features::QuestionType;

/// Registry shipped with the crate.
pub const BUILTIN_REGISTRY: &str = include_str!("../data/templates.json");

/// One row of the registry file: a question template and its declarative prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub template_id: String,
    pub question_pattern: String,
    pub declarative_pattern: String,
    pub question_type: QuestionType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

fn parse_pattern(pattern: &str) -> Result<Vec<Piece>> {
    let slot_re = Regex::new(r"<([A-Z][A-Z0-9_]*)>").expect("static regex");
    let mut pieces = Vec::new();
    let mut last = 0;
    for cap in slot_re.captures_iter(pattern) {
        let whole = cap.get(0).expect("group 0");
        if whole.start() > last {
            pieces.push(Piece::Literal(pattern[last..whole.start()].to_string()));
        }
        if matches!(pieces.last(), Some(Piece::Slot(_))) {
            return Err(TspmError::Config(format!(
                "pattern {pattern:?} has adjacent slots"
            )));
        }
        pieces.push(Piece::Slot(cap[1].to_string()));
        last = whole.end();
    }
    if last < pattern.len() {
        pieces.push(Piece::Literal(pattern[last..].to_string()));
    }
    Ok(pieces)
}

fn slot_names(pieces: &[Piece]) -> Vec<&str> {
    pieces
        .iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Literal(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Compiled {
    entry: TemplateEntry,
    question: Vec<Piece>,
    declarative: Vec<Piece>,
    matcher: Regex,
    literal_len: usize,
}

impl Compiled {
    fn new(entry: TemplateEntry) -> Result<Self> {
        let question = parse_pattern(&entry.question_pattern)?;
        let declarative = parse_pattern(&entry.declarative_pattern)?;
        let q_slots = slot_names(&question);
        for (i, s) in q_slots.iter().enumerate() {
            if q_slots[..i].contains(s) {
                return Err(TspmError::Config(format!(
                    "template {} repeats slot {s}",
                    entry.template_id
                )));
            }
        }
        for s in slot_names(&declarative) {
            if !q_slots.contains(&s) {
                return Err(TspmError::Config(format!(
                    "template {} prompt uses slot {s} absent from its question",
                    entry.template_id
                )));
            }
        }
        let mut re = String::from("^");
        let mut literal_len = 0;
        for p in &question {
            match p {
                Piece::Literal(l) => {
                    re.push_str(&regex::escape(l));
                    literal_len += l.chars().count();
                }
                Piece::Slot(s) => re.push_str(&format!("(?P<{s}>.+?)")),
            }
        }
        re.push('$');
        let matcher = Regex::new(&re)
            .map_err(|e| TspmError::Config(format!("template {}: {e}", entry.template_id)))?;
        Ok(Self {
            entry,
            question,
            declarative,
            matcher,
            literal_len,
        })
    }
}

/// Result of matching a question against the registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateMatch {
    pub template_id: String,
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    templates: Vec<Compiled>,
}

impl Registry {
    pub fn new(entries: Vec<TemplateEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(TspmError::Config("template registry is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut templates = Vec::with_capacity(entries.len());
        for e in entries {
            if !seen.insert(e.template_id.clone()) {
                return Err(TspmError::Config(format!(
                    "duplicate template id {}",
                    e.template_id
                )));
            }
            templates.push(Compiled::new(e)?);
        }
        Ok(Self { templates })
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_REGISTRY).expect("shipped registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries().cloned().collect::<Vec<_>>())
            .expect("entries serialize")
    }

    pub fn entries(&self) -> impl Iterator<Item = &TemplateEntry> {
        self.templates.iter().map(|c| &c.entry)
    }

    pub fn get(&self, template_id: &str) -> Result<&TemplateEntry> {
        self.compiled(template_id).map(|c| &c.entry)
    }

    fn compiled(&self, template_id: &str) -> Result<&Compiled> {
        self.templates
            .iter()
            .find(|c| c.entry.template_id == template_id)
            .ok_or_else(|| TspmError::UnknownTemplate(template_id.to_string()))
    }

    /// Slot names of a template's question pattern, in order.
    pub fn slots(&self, template_id: &str) -> Result<Vec<String>> {
        Ok(slot_names(&self.compiled(template_id)?.question)
            .into_iter()
            .map(String::from)
            .collect())
    }

    pub fn match_template(&self, question: &str) -> Result<TemplateMatch> {
        let mut best: Option<(&Compiled, regex::Captures)> = None;
        for c in &self.templates {
            if let Some(caps) = c.matcher.captures(question) {
                if best.as_ref().is_none_or(|(b, _)| c.literal_len > b.literal_len) {
                    best = Some((c, caps));
                }
            }
        }
        let (c, caps) = best.ok_or_else(|| TspmError::UnmatchedQuestion(question.to_string()))?;
        let bindings = slot_names(&c.question)
            .into_iter()
            .map(|s| (s.to_string(), caps[s].to_string()))
            .collect();
        Ok(TemplateMatch {
            template_id: c.entry.template_id.clone(),
            bindings,
        })
    }

    pub fn construct_prompt(
        &self,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String> {
        let c = self.compiled(template_id)?;
        fill(&c.declarative, template_id, bindings)
    }

    /// Fill a template's question pattern.
    pub fn instantiate(
        &self,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String> {
        let c = self.compiled(template_id)?;
        fill(&c.question, template_id, bindings)
    }

    /// The declarative prompt for `question`, or the question itself when no
    /// template matches. The flag reports whether a template matched.
    pub fn prompt_or_question(&self, question: &str) -> (String, bool) {
        match self.match_template(question) {
            Ok(m) => match self.construct_prompt(&m.template_id, &m.bindings) {
                Ok(p) => (p, true),
                Err(_) => (question.to_string(), false),
            },
            Err(_) => (question.to_string(), false),
        }
    }
}

fn fill(pieces: &[Piece], template_id: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::new();
    for p in pieces {
        match p {
            Piece::Literal(l) => out.push_str(l),
            Piece::Slot(s) => out.push_str(bindings.get(s).ok_or_else(|| TspmError::Binding {
                template: template_id.to_string(),
                slot: s.clone(),
            })?),
        }
    }
    Ok(out)
}

/// Example fillers used when synthesizing questions. Slot names are typed by
/// their alphabetic stem, so `INSTR2` draws from the `INSTR` list.
pub fn slot_fillers(slot: &str) -> &'static [&'static str] {
    match slot.trim_end_matches(|c: char| c.is_ascii_digit()) {
        "ORD" => &["first", "second", "last"],
        "INSTR" => &[
            "piano", "violin", "guitar", "flute", "cello", "accordion", "trumpet", "drum",
        ],
        _ => &["thing"],
    }
}

/// Maps text to a feature vector of the visual width.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Stand-in text encoder: every distinct string maps to a fixed random unit
/// vector, seeded by a hash of the string and the embedder seed.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Embedder for SyntheticEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
            self.seed,
            &format!("embed:{text}"),
        ));
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Embeddings precomputed elsewhere, looked up by exact text.
#[derive(Debug, Clone, Default)]
pub struct LookupEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl LookupEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(crate::error::dim_err("LookupEmbedder::insert", &[self.dim], &[vector.len()]));
        }
        self.table.insert(text.into(), vector);
        Ok(())
    }
}

impl Embedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| TspmError::MissingEmbedding(text.to_string()))
    }
}

pub fn embed_prompt(prompt: &str, embedder: &dyn Embedder) -> Result<Vec<f32>> {
    embedder.embed(prompt)
}
