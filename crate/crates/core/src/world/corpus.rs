use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, Relation, Triple};
use super::{KnowledgeBase, WorldError};
use crate::seed::SeedStream;
use crate::vocab::{FALSE, PREMISE_FALSE, TRUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Bio,
    Open,
    Qa,
    Judgment,
    TruePremise,
    Rejection,
}

/// Relative weights of the non-rejection record formats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatMix {
    pub bio: f64,
    pub open: f64,
    pub qa: f64,
    pub judgment: f64,
    pub true_premise: f64,
}

impl Default for FormatMix {
    fn default() -> Self {
        Self {
            bio: 0.35,
            open: 0.15,
            qa: 0.2,
            judgment: 0.2,
            true_premise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Entities covered, taken from the front of the KB entity list.
    pub num_entities: usize,
    /// Probability that a fact mention carries a distractor instead of the truth.
    pub noise_rate: f64,
    /// Fact mentions generated per entity.
    pub sentences_per_entity: usize,
    /// Fraction of records demonstrating premise rejection.
    pub rejection_exemplar_rate: f64,
    pub seed: u64,
    /// Zipf exponent over pool order when drawing distractors; 0 is uniform.
    #[serde(default = "default_skew")]
    pub distractor_skew: f64,
    /// How often each relation is mentioned, relative to the others.
    #[serde(default = "default_salience")]
    pub salience: BTreeMap<Relation, f64>,
    #[serde(default)]
    pub mix: FormatMix,
    /// Facts per biography, inclusive range.
    #[serde(default = "default_bio_facts")]
    pub bio_facts: (usize, usize),
}

fn default_skew() -> f64 {
    1.0
}

fn default_bio_facts() -> (usize, usize) {
    (3, 5)
}

pub fn default_salience() -> BTreeMap<Relation, f64> {
    use Relation::*;
    [
        (BornYear, 1.5),
        (BornCity, 2.0),
        (Occupation, 3.0),
        (Field, 2.0),
        (Award, 1.0),
        (Team, 0.6),
        (Spouse, 0.5),
        (DiedYear, 0.8),
    ]
    .into_iter()
    .collect()
}

impl CorpusSpec {
    pub fn new(num_entities: usize, seed: u64) -> Self {
        Self {
            num_entities,
            noise_rate: 0.15,
            sentences_per_entity: 40,
            rejection_exemplar_rate: 0.05,
            seed,
            distractor_skew: default_skew(),
            salience: default_salience(),
            mix: FormatMix::default(),
            bio_facts: default_bio_facts(),
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidSpec(m));
        if self.num_entities == 0 || self.sentences_per_entity == 0 {
            return bad("counts must be at least 1".into());
        }
        for (name, v) in [
            ("noise_rate", self.noise_rate),
            ("rejection_exemplar_rate", self.rejection_exemplar_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.distractor_skew >= 0.0 && self.distractor_skew.is_finite()) {
            return bad("distractor_skew must be finite and non-negative".into());
        }
        for r in Relation::ALL {
            match self.salience.get(&r) {
                Some(&w) if w > 0.0 && w.is_finite() => {}
                _ => return bad(format!("salience for {r} must be positive")),
            }
        }
        let m = &self.mix;
        let ws = [m.bio, m.open, m.qa, m.judgment, m.true_premise];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || ws.iter().sum::<f64>() <= 0.0 {
            return bad("format mix weights must be non-negative with a positive sum".into());
        }
        let (lo, hi) = self.bio_facts;
        if lo == 0 || lo > hi || hi > Relation::ALL.len() {
            return bad(format!("bio_facts range ({lo}, {hi}) invalid"));
        }
        Ok(())
    }
}

/// A true/false exemplar: the shown sentence's triple and the label taught.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judged {
    pub shown: Triple,
    pub label: bool,
    /// The label disagrees with the KB.
    pub corrupted: bool,
}

/// One (prompt, response) training record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub kind: RecordKind,
    pub entity: String,
    pub prompt: String,
    pub response: String,
    /// Facts asserted by the response, as written (possibly corrupted).
    pub facts: Vec<Triple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judged: Option<Judged>,
}

impl CorpusRecord {
    /// Prompt and response as one whitespace-separated token sequence.
    pub fn text(&self) -> String {
        format!("{} {}", self.prompt, self.response)
    }
}

/// Fraction of asserted facts whose object disagrees with the KB.
pub fn realized_noise(kb: &KnowledgeBase, corpus: &[CorpusRecord]) -> f64 {
    let (mut bad, mut total) = (0usize, 0usize);
    for f in corpus.iter().flat_map(|r| &r.facts) {
        total += 1;
        if kb.object(&f.entity, f.relation) != Some(f.object.as_str()) {
            bad += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}

struct Sampler<'a> {
    kb: &'a KnowledgeBase,
    spec: &'a CorpusSpec,
    salience: Vec<f64>,
}

impl Sampler<'_> {
    fn distractor(&self, rng: &mut ChaCha8Rng, entity: &str, r: Relation, avoid: &str) -> String {
        let wrong: Vec<&str> = self
            .kb
            .wrong_objects(entity, r)
            .into_iter()
            .filter(|o| *o != avoid)
            .collect();
        let w: Vec<f64> = (0..wrong.len())
            .map(|i| 1.0 / ((i + 1) as f64).powf(self.spec.distractor_skew))
            .collect();
        let i = WeightedIndex::new(&w).expect("non-empty pool").sample(rng);
        wrong[i].to_string()
    }

    /// The object as the corpus states it: the truth, or with probability ε a distractor.
    fn noisy(&self, rng: &mut ChaCha8Rng, entity: &str, r: Relation) -> Triple {
        let truth = self.kb.object(entity, r).expect("known entity");
        let obj = if rng.gen::<f64>() < self.spec.noise_rate {
            self.distractor(rng, entity, r, truth)
        } else {
            truth.to_string()
        };
        Triple::new(entity, r, obj)
    }

    /// `n` distinct relations drawn by salience, in draw order.
    fn relations(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Relation> {
        let mut w = self.salience.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let i = WeightedIndex::new(&w).expect("positive weights").sample(rng);
            out.push(Relation::ALL[i]);
            w[i] = 0.0;
        }
        out
    }

    fn template(rng: &mut ChaCha8Rng, t: &Triple) -> String {
        grammar::verbalize(t, rng.gen_range(0..t.relation.templates().len()))
    }

    fn record(&self, rng: &mut ChaCha8Rng, kind: RecordKind, entity: &str) -> CorpusRecord {
        let mut judged = None;
        let (prompt, response, facts) = match kind {
            RecordKind::Bio => {
                let (lo, hi) = self.spec.bio_facts;
                let n = rng.gen_range(lo..=hi);
                let facts: Vec<Triple> = self
                    .relations(rng, n)
                    .into_iter()
                    .map(|r| self.noisy(rng, entity, r))
                    .collect();
                let body: Vec<String> = facts.iter().map(|t| Self::template(rng, t)).collect();
                (grammar::bio_prompt(entity), body.join(" "), facts)
            }
            RecordKind::Open => {
                let rels = self.relations(rng, 2);
                let facts: Vec<Triple> = rels.iter().map(|&r| self.noisy(rng, entity, r)).collect();
                let body: Vec<String> = facts.iter().map(|t| Self::template(rng, t)).collect();
                (grammar::open_prompt(entity, &rels), body.join(" "), facts)
            }
            RecordKind::Qa => {
                let r = self.relations(rng, 1)[0];
                let t = self.noisy(rng, entity, r);
                (grammar::question(entity, r), format!("{} .", t.object), vec![t])
            }
            RecordKind::Judgment => {
                let r = self.relations(rng, 1)[0];
                let truth = self.kb.object(entity, r).expect("known entity").to_string();
                let shown_true = rng.gen_bool(0.5);
                let obj = if shown_true {
                    truth.clone()
                } else {
                    self.distractor(rng, entity, r, &truth)
                };
                let shown = Triple::new(entity, r, obj);
                let corrupted = rng.gen::<f64>() < self.spec.noise_rate;
                let label = shown_true != corrupted;
                let prompt = grammar::judgment_prompt(&Self::template(rng, &shown));
                let answer = if label { TRUE } else { FALSE };
                judged = Some(Judged { shown, label, corrupted });
                (prompt, answer.to_string(), Vec::new())
            }
            RecordKind::TruePremise => {
                let r = self.relations(rng, 1)[0];
                let t = self.noisy(rng, entity, r);
                (grammar::premise_question(&t), grammar::canonical(&t), vec![t])
            }
            RecordKind::Rejection => {
                let r = self.relations(rng, 1)[0];
                let belief = self.noisy(rng, entity, r);
                // excludes both the truth and the stated belief
                let premise = Triple::new(entity, r, self.distractor(rng, entity, r, &belief.object));
                let response = format!("{PREMISE_FALSE} {}", Self::template(rng, &belief));
                (grammar::premise_question(&premise), response, vec![belief])
            }
        };
        CorpusRecord {
            kind,
            entity: entity.to_string(),
            prompt,
            response,
            facts,
            judged,
        }
    }
}

fn mentions(r: &CorpusRecord) -> usize {
    r.facts.len().max(r.judged.is_some() as usize)
}

/// Noisy pretraining corpus over the first `spec.num_entities` KB entities.
pub fn gen_corpus(kb: &KnowledgeBase, spec: &CorpusSpec) -> Result<Vec<CorpusRecord>, WorldError> {
    spec.validate()?;
    if spec.num_entities > kb.len() {
        return Err(WorldError::InvalidSpec(format!(
            "corpus covers {} entities but the KB has {}",
            spec.num_entities,
            kb.len()
        )));
    }
    let sampler = Sampler {
        kb,
        spec,
        salience: Relation::ALL.iter().map(|r| spec.salience[r]).collect(),
    };
    let m = &spec.mix;
    let kinds = [
        (RecordKind::Bio, m.bio),
        (RecordKind::Open, m.open),
        (RecordKind::Qa, m.qa),
        (RecordKind::Judgment, m.judgment),
        (RecordKind::TruePremise, m.true_premise),
    ];
    let kind_dist = WeightedIndex::new(kinds.iter().map(|k| k.1)).expect("validated mix");
    let stream = SeedStream::new(spec.seed).derive("corpus");
    let mut out = Vec::new();
    for (e, entity) in kb.entities()[..spec.num_entities].iter().enumerate() {
        let mut rng = stream.index(e as u64).rng();
        let mut count = 0;
        while count < spec.sentences_per_entity {
            let kind = if rng.gen::<f64>() < spec.rejection_exemplar_rate {
                RecordKind::Rejection
            } else {
                kinds[kind_dist.sample(&mut rng)].0
            };
            let rec = sampler.record(&mut rng, kind, entity);
            count += mentions(&rec);
            out.push(rec);
        }
    }
    Ok(out)
}
