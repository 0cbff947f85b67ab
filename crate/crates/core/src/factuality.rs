//! Atomic fact extraction over the templated language and FActScore-style
//! scoring against the knowledge base.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::world::grammar::{self, Triple};
use crate::world::KnowledgeBase;

pub const AUDIT_SCHEMA: &str = "faktlab.fact-audit";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicFact {
    pub triple: Triple,
    /// Byte range of the sentence in the source text.
    pub span: Range<usize>,
    pub sentence: String,
}

impl AtomicFact {
    /// A fact standing on its own, verbalized canonically.
    pub fn from_triple(triple: Triple) -> Self {
        let sentence = grammar::canonical(&triple);
        Self {
            span: 0..sentence.len(),
            triple,
            sentence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnparsedSpan {
    pub span: Range<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Extraction {
    pub facts: Vec<AtomicFact>,
    pub unparsed: Vec<UnparsedSpan>,
}

/// Splits text into `.`-terminated sentences; each sentence matching a
/// template yields one fact, anything else is recorded as unparsed.
pub fn extract(text: &str) -> Extraction {
    let mut out = Extraction::default();
    let mut words: Vec<(usize, &str)> = Vec::new();
    let flush = |words: &mut Vec<(usize, &str)>, out: &mut Extraction| {
        if words.is_empty() {
            return;
        }
        let (start, _) = words[0];
        let (last, w) = words[words.len() - 1];
        let span = start..last + w.len();
        let toks: Vec<&str> = words.iter().map(|(_, w)| *w).collect();
        match grammar::parse_sentence(&toks) {
            Some(triple) => out.facts.push(AtomicFact {
                triple,
                sentence: toks.join(" "),
                span,
            }),
            None => out.unparsed.push(UnparsedSpan {
                text: text[span.clone()].to_string(),
                span,
            }),
        }
        words.clear();
    };
    let mut pos = 0;
    for w in text.split_whitespace() {
        let at = pos + text[pos..].find(w).expect("word comes from text");
        pos = at + w.len();
        words.push((at, w));
        if w == "." {
            flush(&mut words, &mut out);
        }
    }
    flush(&mut words, &mut out);
    out
}

pub fn extract_atomic_facts(text: &str) -> Vec<AtomicFact> {
    extract(text).facts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactVerdict {
    Supported,
    Contradicted,
    NotFound,
}

pub fn verify_triple(t: &Triple, kb: &KnowledgeBase) -> FactVerdict {
    match kb.object(&t.entity, t.relation) {
        Some(o) if o == t.object => FactVerdict::Supported,
        Some(_) => FactVerdict::Contradicted,
        None => FactVerdict::NotFound,
    }
}

pub fn verify_fact(fact: &AtomicFact, kb: &KnowledgeBase) -> FactVerdict {
    verify_triple(&fact.triple, kb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Count NotFound facts in the denominator.
    pub include_not_found: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { include_not_found: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactualityReport {
    pub fs: f64,
    pub nc: usize,
    pub ne: usize,
    pub nf: usize,
    /// Facts in the denominator: `nc + ne + nf`, or `nc + ne` when NotFound
    /// facts are excluded.
    pub total: usize,
    /// No fact was extracted; `fs` is 0 by convention.
    pub empty: bool,
    pub unparsed: usize,
}

impl FactualityReport {
    pub fn from_verdicts(verdicts: &[FactVerdict], unparsed: usize, cfg: &ScoreConfig) -> Self {
        let count = |v| verdicts.iter().filter(|&&x| x == v).count();
        let (nc, ne, nf) = (
            count(FactVerdict::Supported),
            count(FactVerdict::Contradicted),
            count(FactVerdict::NotFound),
        );
        let total = if cfg.include_not_found { nc + ne + nf } else { nc + ne };
        Self {
            fs: if total == 0 { 0.0 } else { nc as f64 / total as f64 },
            nc,
            ne,
            nf,
            total,
            empty: verdicts.is_empty(),
            unparsed,
        }
    }
}

pub fn factscore(text: &str, kb: &KnowledgeBase) -> FactualityReport {
    factscore_with(text, kb, &ScoreConfig::default())
}

pub fn factscore_with(text: &str, kb: &KnowledgeBase, cfg: &ScoreConfig) -> FactualityReport {
    let ex = extract(text);
    let verdicts: Vec<FactVerdict> = ex.facts.iter().map(|f| verify_fact(f, kb)).collect();
    FactualityReport::from_verdicts(&verdicts, ex.unparsed.len(), cfg)
}

/// One line of a fact-level audit file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactAudit {
    pub text_id: String,
    pub triple: Triple,
    pub verdict: FactVerdict,
    pub span: Range<usize>,
    pub sentence: String,
}

pub fn audit(text_id: &str, text: &str, kb: &KnowledgeBase) -> Vec<FactAudit> {
    extract(text)
        .facts
        .into_iter()
        .map(|f| FactAudit {
            text_id: text_id.to_string(),
            verdict: verify_fact(&f, kb),
            triple: f.triple,
            span: f.span,
            sentence: f.sentence,
        })
        .collect()
}
