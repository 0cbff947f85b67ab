use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, Relation, Triple};
use super::{KnowledgeBase, WorldError};
use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioQuery {
    pub entity: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenQuery {
    pub entity: String,
    pub relations: Vec<Relation>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalsePremiseQuery {
    pub entity: String,
    pub relation: Relation,
    /// Object presupposed by the question.
    pub premise_object: String,
    /// Object recorded in the KB.
    pub gold_object: String,
    /// The premise contradicts the KB (always true for generated items).
    pub premise_false: bool,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortQaQuery {
    pub entity: String,
    pub relation: Relation,
    pub gold: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuerySets {
    pub id_bio: Vec<BioQuery>,
    pub ood_open: Vec<OpenQuery>,
    pub ood_fp: Vec<FalsePremiseQuery>,
    pub ood_kqa: Vec<ShortQaQuery>,
}

/// Which entities the out-of-domain sets draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OodEntities {
    #[default]
    All,
    Preference,
    HeldOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub open_items: usize,
    pub fp_items: usize,
    pub kqa_items: usize,
    #[serde(default)]
    pub ood_entities: OodEntities,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            open_items: 100,
            fp_items: 100,
            kqa_items: 200,
            ood_entities: OodEntities::All,
        }
    }
}

pub fn gen_queries(
    kb: &KnowledgeBase,
    preference_entities: &BTreeSet<String>,
    seed: u64,
) -> Result<QuerySets, WorldError> {
    gen_queries_with(kb, preference_entities, seed, &QueryConfig::default())
}

/// Distinct (entity, relation) cells, cycling through entities so coverage is even.
fn cells(pool: &[&str], n: usize, rng: &mut impl Rng) -> Vec<(String, Relation)> {
    let mut per_entity: Vec<Vec<Relation>> = pool
        .iter()
        .map(|_| {
            let mut rs = Relation::ALL.to_vec();
            rs.shuffle(rng);
            rs
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let n = n.min(pool.len() * Relation::ALL.len());
    let mut out = Vec::with_capacity(n);
    'fill: loop {
        for &e in &order {
            if out.len() == n {
                break 'fill;
            }
            if let Some(r) = per_entity[e].pop() {
                out.push((pool[e].to_string(), r));
            }
        }
    }
    out
}

pub fn gen_queries_with(
    kb: &KnowledgeBase,
    preference_entities: &BTreeSet<String>,
    seed: u64,
    cfg: &QueryConfig,
) -> Result<QuerySets, WorldError> {
    if let Some(e) = preference_entities.iter().find(|e| !kb.contains_entity(e)) {
        return Err(WorldError::UnknownEntity(e.clone()));
    }
    let held_out: Vec<&str> = kb
        .entities()
        .iter()
        .map(String::as_str)
        .filter(|e| !preference_entities.contains(*e))
        .collect();
    if held_out.is_empty() {
        return Err(WorldError::NoHeldOutEntities);
    }
    let stream = SeedStream::new(seed).derive("queries");
    let id_bio = held_out
        .iter()
        .map(|e| BioQuery {
            entity: e.to_string(),
            prompt: grammar::bio_prompt(e),
        })
        .collect();

    let ood_pool: Vec<&str> = match cfg.ood_entities {
        OodEntities::All => kb.entities().iter().map(String::as_str).collect(),
        OodEntities::Preference => preference_entities.iter().map(String::as_str).collect(),
        OodEntities::HeldOut => held_out.clone(),
    };
    if ood_pool.is_empty() {
        return Err(WorldError::InvalidSpec("out-of-domain entity pool is empty".into()));
    }

    let mut rng = stream.derive("open").rng();
    let mut ood_open = Vec::with_capacity(cfg.open_items);
    for i in 0..cfg.open_items {
        let entity = ood_pool[i % ood_pool.len()];
        let mut rels = Relation::ALL.to_vec();
        rels.shuffle(&mut rng);
        rels.truncate(2);
        ood_open.push(OpenQuery {
            entity: entity.to_string(),
            prompt: grammar::open_prompt(entity, &rels),
            relations: rels,
        });
    }

    let mut rng = stream.derive("fp").rng();
    let ood_fp = cells(&ood_pool, cfg.fp_items, &mut rng)
        .into_iter()
        .map(|(entity, relation)| {
            let gold = kb.object(&entity, relation).expect("known entity").to_string();
            let wrong = kb.wrong_objects(&entity, relation);
            let premise_object = wrong[rng.gen_range(0..wrong.len())].to_string();
            let prompt = grammar::premise_question(&Triple::new(entity.as_str(), relation, premise_object.as_str()));
            FalsePremiseQuery {
                entity,
                relation,
                premise_object,
                gold_object: gold,
                premise_false: true,
                prompt,
            }
        })
        .collect();

    let mut rng = stream.derive("kqa").rng();
    let ood_kqa = cells(&ood_pool, cfg.kqa_items, &mut rng)
        .into_iter()
        .map(|(entity, relation)| ShortQaQuery {
            gold: kb.object(&entity, relation).expect("known entity").to_string(),
            prompt: grammar::question(&entity, relation),
            entity,
            relation,
        })
        .collect();

    Ok(QuerySets {
        id_bio,
        ood_open,
        ood_fp,
        ood_kqa,
    })
}

/// Seeded choice of `n` preference entities; the rest are held out.
pub fn split_entities(kb: &KnowledgeBase, n: usize, seed: u64) -> Result<BTreeSet<String>, WorldError> {
    if n >= kb.len() {
        return Err(WorldError::NoHeldOutEntities);
    }
    let mut names: Vec<&String> = kb.entities().iter().collect();
    names.shuffle(&mut SeedStream::new(seed).derive("entity-split").rng());
    Ok(names.into_iter().take(n).cloned().collect())
}
