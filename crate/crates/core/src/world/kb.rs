use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, Relation, Triple};
use super::WorldError;
use crate::seed::SeedStream;

const NAME_HEADS: [&str; 24] = [
    "Al", "Bor", "Cas", "Dra", "El", "Fen", "Gar", "Hal", "Iv", "Jor", "Kal", "Lor", "Mar", "Nor", "Or", "Per",
    "Quin", "Ros", "Sar", "Tor", "Ul", "Val", "Wen", "Zan",
];
const NAME_TAILS: [&str; 24] = [
    "ric", "wen", "dor", "mira", "lis", "ton", "vik", "ra", "sel", "dan", "ith", "mond", "lea", "rus", "gar", "nia",
    "bert", "ko", "win", "zel", "bur", "ett", "lan", "ov",
];

/// Deterministic list of `n` distinct entity names.
pub fn entity_names(seed: u64, n: usize) -> Vec<String> {
    let literals = grammar::literal_words();
    let mut base: Vec<String> = NAME_HEADS
        .iter()
        .flat_map(|h| NAME_TAILS.iter().map(move |t| format!("{h}{t}")))
        .filter(|w| Relation::of_object(w).is_none() && !literals.contains(&w.as_str()))
        .collect();
    base.shuffle(&mut SeedStream::new(seed).derive("entity-names").rng());
    let per_round = base.len();
    (0..n)
        .map(|i| {
            let name = &base[i % per_round];
            match i / per_round {
                0 => name.clone(),
                round => format!("{name}{}", round + 1),
            }
        })
        .collect()
}

/// Functional knowledge base: exactly one object per (entity, relation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KbRepr", into = "KbRepr")]
pub struct KnowledgeBase {
    entities: Vec<String>,
    /// `objects[e][r]` for entity index `e` and relation index `r`.
    objects: Vec<Vec<String>>,
    distractor_pools: BTreeMap<Relation, Vec<String>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct KbRepr {
    entities: Vec<String>,
    objects: Vec<Vec<String>>,
    distractor_pools: BTreeMap<Relation, Vec<String>>,
}

impl TryFrom<KbRepr> for KnowledgeBase {
    type Error = WorldError;
    fn try_from(r: KbRepr) -> Result<Self, WorldError> {
        KnowledgeBase::new(r.entities, r.objects, r.distractor_pools)
    }
}

impl From<KnowledgeBase> for KbRepr {
    fn from(kb: KnowledgeBase) -> Self {
        KbRepr {
            entities: kb.entities,
            objects: kb.objects,
            distractor_pools: kb.distractor_pools,
        }
    }
}

/// Random knowledge base over `num_entities` generated names. True objects are
/// uniform over each relation's pool.
pub fn gen_kb(seed: u64, num_entities: usize) -> Result<KnowledgeBase, WorldError> {
    if num_entities < 2 {
        return Err(WorldError::InvalidSpec(format!("need at least 2 entities, got {num_entities}")));
    }
    let entities = entity_names(seed, num_entities);
    let stream = SeedStream::new(seed).derive("kb");
    let objects = (0..num_entities)
        .map(|e| {
            let mut rng = stream.index(e as u64).rng();
            Relation::ALL
                .iter()
                .map(|r| {
                    let pool = r.pool();
                    pool[rng.gen_range(0..pool.len())].to_string()
                })
                .collect()
        })
        .collect();
    let pools = Relation::ALL
        .iter()
        .map(|&r| (r, r.pool().iter().map(|s| s.to_string()).collect()))
        .collect();
    KnowledgeBase::new(entities, objects, pools)
}

impl KnowledgeBase {
    pub fn new(
        entities: Vec<String>,
        objects: Vec<Vec<String>>,
        distractor_pools: BTreeMap<Relation, Vec<String>>,
    ) -> Result<Self, WorldError> {
        if objects.len() != entities.len() {
            return Err(WorldError::InvalidKb("one object row per entity required".into()));
        }
        let mut index = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if !grammar::is_entity_like(e) || e.contains(char::is_whitespace) {
                return Err(WorldError::InvalidKb(format!("{e:?} is not a valid entity name")));
            }
            if index.insert(e.clone(), i).is_some() {
                return Err(WorldError::InvalidKb(format!("duplicate entity {e:?}")));
            }
        }
        for r in Relation::ALL {
            let pool = distractor_pools
                .get(&r)
                .ok_or_else(|| WorldError::InvalidKb(format!("no distractor pool for {r}")))?;
            if let Some(o) = pool.iter().find(|o| !r.pool().contains(&o.as_str())) {
                return Err(WorldError::InvalidKb(format!("{o:?} is outside the {r} domain")));
            }
            for (e, row) in entities.iter().zip(&objects) {
                if row.len() != Relation::ALL.len() {
                    return Err(WorldError::InvalidKb(format!("{e} lacks a full relation row")));
                }
                if !pool.contains(&row[r.index()]) {
                    return Err(WorldError::InvalidKb(format!(
                        "object {:?} of ({e}, {r}) missing from the distractor pool",
                        row[r.index()]
                    )));
                }
            }
        }
        Ok(Self {
            entities,
            objects,
            distractor_pools,
            index,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.index.contains_key(entity)
    }

    pub fn entity_index(&self, entity: &str) -> Option<usize> {
        self.index.get(entity).copied()
    }

    pub fn object(&self, entity: &str, relation: Relation) -> Option<&str> {
        self.index
            .get(entity)
            .map(|&e| self.objects[e][relation.index()].as_str())
    }

    pub fn triple(&self, entity: &str, relation: Relation) -> Option<Triple> {
        self.object(entity, relation).map(|o| Triple::new(entity, relation, o))
    }

    pub fn distractor_pool(&self, relation: Relation) -> &[String] {
        &self.distractor_pools[&relation]
    }

    /// All triples, entity-major in relation order.
    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.entities.iter().zip(&self.objects).flat_map(|(e, row)| {
            Relation::ALL
                .iter()
                .map(move |&r| Triple::new(e.as_str(), r, row[r.index()].as_str()))
        })
    }

    pub fn num_triples(&self) -> usize {
        self.entities.len() * Relation::ALL.len()
    }

    /// Wrong objects for `(entity, relation)` in pool (popularity) order.
    pub fn wrong_objects(&self, entity: &str, relation: Relation) -> Vec<&str> {
        let truth = self.object(entity, relation);
        self.distractor_pool(relation)
            .iter()
            .map(String::as_str)
            .filter(|o| Some(*o) != truth)
            .collect()
    }

    /// Tab-separated text form: a `[triples]` section of
    /// `entity<TAB>relation<TAB>object` lines and a `[distractors]` section of
    /// `relation<TAB>object<TAB>object...` lines.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# faktlab knowledge base v1")?;
        writeln!(w, "[triples]")?;
        for t in self.triples() {
            writeln!(w, "{}\t{}\t{}", t.entity, t.relation, t.object)?;
        }
        writeln!(w, "[distractors]")?;
        for (r, pool) in &self.distractor_pools {
            writeln!(w, "{r}\t{}", pool.join("\t"))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, WorldError> {
        let mut section = "";
        let mut entities: Vec<String> = Vec::new();
        let mut rows: HashMap<String, Vec<Option<String>>> = HashMap::new();
        let mut pools = BTreeMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |msg: String| WorldError::Parse { line: n + 1, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[triples]" || line == "[distractors]" {
                section = if line == "[triples]" { "triples" } else { "distractors" };
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match section {
                "triples" => {
                    let [e, rel, o] = cols[..] else {
                        return Err(bad(format!("expected 3 columns, got {}", cols.len())));
                    };
                    let rel: Relation = rel.parse().map_err(bad)?;
                    let row = rows.entry(e.to_string()).or_insert_with(|| {
                        entities.push(e.to_string());
                        vec![None; Relation::ALL.len()]
                    });
                    if row[rel.index()].replace(o.to_string()).is_some() {
                        return Err(bad(format!("second object for ({e}, {rel})")));
                    }
                }
                "distractors" => {
                    let rel: Relation = cols[0].parse().map_err(bad)?;
                    pools.insert(rel, cols[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>());
                }
                _ => return Err(bad("content before a section header".into())),
            }
        }
        let objects = entities
            .iter()
            .map(|e| {
                rows[e]
                    .iter()
                    .zip(Relation::ALL)
                    .map(|(o, r)| {
                        o.clone()
                            .ok_or_else(|| WorldError::InvalidKb(format!("missing object for ({e}, {r})")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        KnowledgeBase::new(entities, objects, pools)
    }
}
