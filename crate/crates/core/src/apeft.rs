//! Atomic preference enhanced factuality tuning: facts are extracted from
//! both sides of every general preference, the model's knowledge of each is
//! probed by sampling true/false judgments, and facts the model only
//! sometimes gets right become single-fact preference pairs that are mixed
//! into the general data.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factuality::{extract_atomic_facts, verify_fact, AtomicFact, FactVerdict};
use crate::prefgen::{GeneralPreference, HasQuality};
use crate::seed::SeedStream;
use crate::tinylm::{self, draw, ModelError, PolicyModel, SampleSpec};
use crate::vocab::{TokenId, Vocab, VocabError, FALSE, TRUE};
use crate::world::grammar::{self, Relation, Triple};
use crate::world::{encode_prompt, KnowledgeBase};

pub const DETECTION_AUDIT_SCHEMA: &str = "faktlab.detection-audit";

/// Atomic preference count per model in the large-model study, kept for
/// scale comparisons in reports.
pub const REFERENCE_ATOMIC_COUNT: usize = 2063;

#[derive(Debug, Error)]
pub enum ApeftError {
    #[error("need at least 2 detection samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, ApeftError>;

/// A single-fact true/false question and its correct answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeProbe {
    pub fact: AtomicFact,
    pub prompt: String,
    /// The fact agrees with the KB.
    pub gold: bool,
}

impl KnowledgeProbe {
    pub fn new(fact: AtomicFact, kb: &KnowledgeBase) -> Self {
        Self {
            prompt: grammar::judgment_prompt(&fact.sentence),
            gold: verify_fact(&fact, kb) == FactVerdict::Supported,
            fact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeStatus {
    Unknown,
    PotentiallyKnown,
    Known,
}

impl KnowledgeStatus {
    /// Status from `correct` out of `k` samples.
    pub fn of(correct: usize, k: usize) -> Self {
        if correct == 0 {
            KnowledgeStatus::Unknown
        } else if correct == k {
            KnowledgeStatus::Known
        } else {
            KnowledgeStatus::PotentiallyKnown
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Fraction of correct samples.
    pub r: f64,
    pub k: usize,
    pub correct: usize,
    pub status: KnowledgeStatus,
    /// Sampled answers, in sample order.
    pub transcripts: Vec<String>,
    /// Samples that were neither answer token (unconstrained decoding only).
    pub unparseable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    pub k: usize,
    /// Restrict the answer to the two judgment tokens.
    pub constrained: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { k: 16, constrained: true }
    }
}

/// Anything that yields a next-token distribution for a prompt.
pub trait AnswerModel: Sync {
    fn answer_dist(&self, prompt: &[TokenId]) -> tinylm::Result<Vec<f64>>;
}

impl AnswerModel for PolicyModel {
    fn answer_dist(&self, prompt: &[TokenId]) -> tinylm::Result<Vec<f64>> {
        self.next_token_dist(prompt)
    }
}

/// Samples `cfg.k` answers at temperature `spec.temperature`. Sample `j`
/// draws from the stream derived from `spec.seed` and `j`.
pub fn detect_knowledge<M: AnswerModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    probe: &KnowledgeProbe,
    cfg: &DetectionConfig,
    spec: &SampleSpec,
) -> Result<DetectionResult> {
    if cfg.k < 2 {
        return Err(ApeftError::TooFewSamples(cfg.k));
    }
    spec.validate()?;
    let prompt = encode_prompt(vocab, &probe.prompt)?;
    let mut dist = model.answer_dist(&prompt)?;
    let (t, f) = (vocab.true_id() as usize, vocab.false_id() as usize);
    if spec.temperature != 1.0 {
        for p in dist.iter_mut() {
            *p = p.powf(1.0 / spec.temperature);
        }
    }
    if cfg.constrained {
        for (i, p) in dist.iter_mut().enumerate() {
            if i != t && i != f {
                *p = 0.0;
            }
        }
    }
    let z: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|p| *p /= z);
    let stream = SeedStream::new(spec.seed).derive("detect");
    let mut transcripts = Vec::with_capacity(cfg.k);
    let (mut correct, mut unparseable) = (0, 0);
    for j in 0..cfg.k {
        let u: f64 = stream.index(j as u64).rng().gen();
        let tok = draw(&dist, u);
        let answer = vocab.token(tok)?;
        match answer {
            TRUE | FALSE => correct += ((answer == TRUE) == probe.gold) as usize,
            _ => unparseable += 1,
        }
        transcripts.push(answer.to_string());
    }
    Ok(DetectionResult {
        r: correct as f64 / cfg.k as f64,
        k: cfg.k,
        correct,
        status: KnowledgeStatus::of(correct, cfg.k),
        transcripts,
        unparseable,
    })
}

/// Origin of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    General,
    Atomic,
    RandomQa,
}

/// The shared record schema of every preference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub source: PairSource,
    pub x: String,
    pub y_w: String,
    pub y_l: String,
    pub f_w: f64,
    pub f_l: f64,
    pub q: f64,
    pub entity: String,
    /// Probed fact (atomic pairs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<Triple>,
    /// Detection rate of the probed fact (atomic pairs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Index of the general preference the fact was extracted from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

impl HasQuality for PreferenceRecord {
    fn quality(&self) -> f64 {
        self.q
    }
}

impl From<&GeneralPreference> for PreferenceRecord {
    fn from(p: &GeneralPreference) -> Self {
        Self {
            source: PairSource::General,
            x: p.x.clone(),
            y_w: p.y_w.clone(),
            y_l: p.y_l.clone(),
            f_w: p.f_w,
            f_l: p.f_l,
            q: p.q,
            entity: p.entity.clone(),
            fact: None,
            r: None,
            origin: None,
        }
    }
}

impl PreferenceRecord {
    pub fn to_tokens(&self, vocab: &Vocab) -> std::result::Result<crate::preflosses::TokenPair, VocabError> {
        crate::prefgen::to_token_pair(vocab, &self.x, &self.y_w, &self.y_l)
    }
}

pub type AtomicPreference = PreferenceRecord;

/// A fact together with the first general preference it appeared in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcedFact {
    pub fact: AtomicFact,
    pub origin: Option<usize>,
}

/// Facts from both responses of every pair, deduplicated by triple in order
/// of first appearance.
pub fn extract_pref_facts_sourced(dataset: &[GeneralPreference]) -> Vec<SourcedFact> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, p) in dataset.iter().enumerate() {
        for text in [&p.y_w, &p.y_l] {
            for f in extract_atomic_facts(text) {
                if seen.insert(f.triple.clone()) {
                    out.push(SourcedFact { fact: f, origin: Some(i) });
                }
            }
        }
    }
    out
}

pub fn extract_pref_facts(dataset: &[GeneralPreference]) -> Vec<AtomicFact> {
    extract_pref_facts_sourced(dataset).into_iter().map(|s| s.fact).collect()
}

/// One line of the detection audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionAudit {
    pub probe: KnowledgeProbe,
    pub result: DetectionResult,
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicBuild {
    pub prefs: Vec<AtomicPreference>,
    pub audit: Vec<DetectionAudit>,
}

/// Pair from a potentially-known fact: the first correct and the first
/// incorrect transcript.
fn pair_from(
    probe: &KnowledgeProbe,
    res: &DetectionResult,
    origin: Option<usize>,
    source: PairSource,
) -> Option<AtomicPreference> {
    if res.status != KnowledgeStatus::PotentiallyKnown {
        return None;
    }
    let gold = if probe.gold { TRUE } else { FALSE };
    let y_w = res.transcripts.iter().find(|t| t.as_str() == gold)?;
    let y_l = res.transcripts.iter().find(|t| t.as_str() != gold)?;
    Some(PreferenceRecord {
        source,
        x: probe.prompt.clone(),
        y_w: y_w.clone(),
        y_l: y_l.clone(),
        f_w: 1.0,
        f_l: 0.0,
        q: 1.0,
        entity: probe.fact.triple.entity.clone(),
        fact: Some(probe.fact.triple.clone()),
        r: Some(res.r),
        origin,
    })
}

fn detect_all<M: AnswerModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    probes: &[(KnowledgeProbe, Option<usize>)],
    cfg: &DetectionConfig,
    spec: &SampleSpec,
    label: &str,
) -> Result<Vec<DetectionAudit>> {
    let stream = SeedStream::new(spec.seed).derive(label);
    probes
        .par_iter()
        .enumerate()
        .map(|(i, (probe, origin))| {
            let s = spec.with_seed(stream.index(i as u64).key());
            Ok(DetectionAudit {
                result: detect_knowledge(model, vocab, probe, cfg, &s)?,
                probe: probe.clone(),
                origin: *origin,
            })
        })
        .collect()
}

/// Probes every fact; potentially-known facts yield one pair each.
pub fn build_atomic_prefs<M: AnswerModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    facts: &[SourcedFact],
    cfg: &DetectionConfig,
    spec: &SampleSpec,
) -> Result<AtomicBuild> {
    let probes: Vec<(KnowledgeProbe, Option<usize>)> = facts
        .iter()
        .map(|f| (KnowledgeProbe::new(f.fact.clone(), kb), f.origin))
        .collect();
    let audit = detect_all(model, vocab, &probes, cfg, spec, "atomic")?;
    let prefs = audit
        .iter()
        .filter_map(|a| pair_from(&a.probe, &a.result, a.origin, PairSource::Atomic))
        .collect();
    Ok(AtomicBuild { prefs, audit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedDataset {
    pub records: Vec<PreferenceRecord>,
    pub general_count: usize,
    pub atomic_count: usize,
}

/// `D_g ∪ D_a`, shuffled under `seed`.
pub fn mix(general: &[PreferenceRecord], atomic: &[PreferenceRecord], seed: u64) -> MixedDataset {
    let mut records: Vec<PreferenceRecord> = general.iter().chain(atomic).cloned().collect();
    if !atomic.is_empty() {
        records.shuffle(&mut SeedStream::new(seed).derive("mix").rng());
    }
    MixedDataset {
        records,
        general_count: general.len(),
        atomic_count: atomic.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomQaBuild {
    pub prefs: Vec<AtomicPreference>,
    pub audit: Vec<DetectionAudit>,
    /// Fewer potentially-known probes than requested were found.
    pub shortfall: bool,
}

/// Single-fact probes about `entities` that do not come from preference
/// responses: each (entity, relation) cell, in seeded order, is stated with
/// its true object or a random wrong one. Cells whose stated triple is in
/// `exclude` are skipped. Probing stops once `target_size` pairs exist.
#[allow(clippy::too_many_arguments)]
pub fn build_random_qa_prefs<M: AnswerModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    entities: &BTreeSet<String>,
    exclude: &HashSet<Triple>,
    cfg: &DetectionConfig,
    spec: &SampleSpec,
    target_size: usize,
) -> Result<RandomQaBuild> {
    let stream = SeedStream::new(spec.seed).derive("random-qa");
    let mut rng = stream.derive("cells").rng();
    let mut cells: Vec<(&String, Relation)> = entities
        .iter()
        .filter(|e| kb.contains_entity(e))
        .flat_map(|e| Relation::ALL.into_iter().map(move |r| (e, r)))
        .collect();
    cells.shuffle(&mut rng);
    let mut probes = Vec::new();
    for (e, r) in cells {
        let truth = kb.object(e, r).expect("filtered to KB entities");
        let object = if rng.gen_bool(0.5) {
            truth.to_string()
        } else {
            let wrong = kb.wrong_objects(e, r);
            wrong[rng.gen_range(0..wrong.len())].to_string()
        };
        let triple = Triple::new(e.as_str(), r, object);
        if exclude.contains(&triple) {
            continue;
        }
        let sentence = grammar::verbalize(&triple, rng.gen_range(0..r.templates().len()));
        let fact = AtomicFact {
            span: 0..sentence.len(),
            triple,
            sentence,
        };
        probes.push((KnowledgeProbe::new(fact, kb), None));
    }
    let mut prefs = Vec::new();
    let mut audit = Vec::new();
    // probe in blocks so large candidate pools stop early
    for (b, block) in probes.chunks(64).enumerate() {
        if prefs.len() >= target_size {
            break;
        }
        let got = detect_all(model, vocab, block, cfg, &spec.with_seed(stream.index(b as u64).key()), "probe")?;
        for a in got {
            if prefs.len() < target_size {
                if let Some(p) = pair_from(&a.probe, &a.result, None, PairSource::RandomQa) {
                    prefs.push(p);
                }
            }
            audit.push(a);
        }
    }
    Ok(RandomQaBuild {
        shortfall: prefs.len() < target_size,
        prefs,
        audit,
    })
}

#[cfg(test)]
mod tests;
