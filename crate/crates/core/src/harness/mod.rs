//! End-to-end experiments: world, base model, preference data, tuning arms,
//! evaluation, token-shift diagnosis, sweeps, reports and replay.

mod config;
mod eval;
mod report;
mod rundir;
mod sweeps;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apeft::{
    self, build_atomic_prefs, build_random_qa_prefs, extract_pref_facts_sourced, mix, AtomicBuild, MixedDataset,
    PairSource, PreferenceRecord, RandomQaBuild,
};
use crate::prefgen::{self, build_general_dataset, EntityPrompt, GeneralDataset};
use crate::preflosses::{self, tune, LossKind, TokenPair, TuneOutput};
use crate::records::RecordError;
use crate::tinylm::{self, pretrain, PolicyModel, PretrainLog};
use crate::tokenshift::{self, analyze, diagnose, histogram, DiagnosisReport, ShiftHistogram, ShiftRecord};
use crate::vocab::{TokenId, Vocab, VocabError};
use crate::world::{
    corpus_examples, encode_prompt, gen_corpus, gen_kb, gen_queries_with, grammar, split_entities, CorpusRecord,
    KnowledgeBase, QuerySets, WorldError,
};

pub use config::{
    Arm, ArmsSection, DetectionSection, EvalSection, ExperimentConfig, LossSection, ModelSection, PrefsSection,
    PretrainSection, SweepSection, TrainSection, WorldSection, CONFIG_VERSION, DESK_BETA,
};
pub use eval::{
    eval_false_premise, eval_long_form, eval_short_qa, evaluate, normalize_answer, short_answer_correct, EvalReport,
    LongFormMetrics,
};
pub use report::{read_report_csv, render_table, write_report_csv, ReportRow, VANILLA};
pub use rundir::{
    load_manifest, replay, run_experiment, DatasetSizes, ExperimentOutcome, ReplayCheck, RunDir, RunManifest, DETECTION_FILE, MANIFEST_FILE,
    REPORT_FILE,
};
pub use sweeps::{sweep_quality, sweep_quantity, write_sweep_csvs, SweepRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("missing artifact {0}; run the producing stage first")]
    MissingArtifact(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] tinylm::ModelError),
    #[error(transparent)]
    Pref(#[from] preflosses::PrefError),
    #[error(transparent)]
    Prefgen(#[from] prefgen::PrefgenError),
    #[error(transparent)]
    Apeft(#[from] apeft::ApeftError),
    #[error(transparent)]
    Shift(#[from] tokenshift::ShiftError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Everything generated before any model exists.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub kb: KnowledgeBase,
    pub vocab: Vocab,
    pub corpus: Vec<CorpusRecord>,
    pub preference_entities: BTreeSet<String>,
    pub queries: QuerySets,
}

impl World {
    pub fn held_out_entities(&self) -> BTreeSet<String> {
        self.kb
            .entities()
            .iter()
            .filter(|e| !self.preference_entities.contains(*e))
            .cloned()
            .collect()
    }

    /// Biography prompts over the preference entities.
    pub fn preference_prompts(&self) -> Vec<EntityPrompt> {
        self.preference_entities
            .iter()
            .map(|e| EntityPrompt {
                entity: e.clone(),
                prompt: grammar::bio_prompt(e),
            })
            .collect()
    }
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let kb = gen_kb(cfg.stream("kb").key(), cfg.world.num_entities)?;
    let vocab = crate::world::world_vocab(&kb)?;
    let corpus = gen_corpus(&kb, &cfg.corpus_spec())?;
    let preference_entities = split_entities(&kb, cfg.world.preference_entities, cfg.stream("split").key())?;
    let queries = gen_queries_with(&kb, &preference_entities, cfg.stream("queries").key(), &cfg.queries)?;
    Ok(World {
        kb,
        vocab,
        corpus,
        preference_entities,
        queries,
    })
}

pub fn pretrain_base(cfg: &ExperimentConfig, world: &World) -> Result<(PolicyModel, Vec<PretrainLog>)> {
    let mut model = PolicyModel::init(cfg.model_config(world.vocab.len()))?;
    let data = corpus_examples(&world.vocab, &world.corpus)?;
    let log = pretrain(&mut model, &data, &cfg.pretrain_config())?;
    Ok((model, log))
}

pub fn build_prefs(cfg: &ExperimentConfig, world: &World, base: &PolicyModel) -> Result<GeneralDataset> {
    Ok(build_general_dataset(
        base,
        &world.vocab,
        &world.preference_prompts(),
        cfg.prefs.responses_per_prompt,
        &world.kb,
        &cfg.prefs_spec(),
    )?)
}

pub fn general_records(prefs: &GeneralDataset) -> Vec<PreferenceRecord> {
    prefs.pairs.iter().map(PreferenceRecord::from).collect()
}

pub fn build_atomic(cfg: &ExperimentConfig, world: &World, base: &PolicyModel, prefs: &GeneralDataset) -> Result<AtomicBuild> {
    let facts = extract_pref_facts_sourced(&prefs.pairs);
    Ok(build_atomic_prefs(
        base,
        &world.vocab,
        &world.kb,
        &facts,
        &cfg.detection_config(),
        &cfg.detection_spec("detect-atomic"),
    )?)
}

/// Random single-fact preferences about the preference entities, avoiding
/// every fact stated in a preference response.
pub fn build_random(
    cfg: &ExperimentConfig,
    world: &World,
    base: &PolicyModel,
    prefs: &GeneralDataset,
    target: usize,
) -> Result<RandomQaBuild> {
    let exclude: HashSet<_> = extract_pref_facts_sourced(&prefs.pairs)
        .into_iter()
        .map(|f| f.fact.triple)
        .collect();
    Ok(build_random_qa_prefs(
        base,
        &world.vocab,
        &world.kb,
        &prefs.manifest.prompt_entities,
        &exclude,
        &cfg.detection_config(),
        &cfg.detection_spec("detect-random"),
        target,
    )?)
}

/// Training records of an arm. `extra` is ignored for the general arm.
pub fn arm_dataset(cfg: &ExperimentConfig, arm: Arm, general: &[PreferenceRecord], extra: &[PreferenceRecord]) -> MixedDataset {
    match arm {
        Arm::General => mix(general, &[], cfg.stream("mix").key()),
        Arm::Atom | Arm::Rand => mix(general, extra, cfg.stream("mix").key()),
    }
}

pub fn tokenize_records(vocab: &Vocab, records: &[PreferenceRecord]) -> Result<Vec<TokenPair>> {
    Ok(records.iter().map(|r| r.to_tokens(vocab)).collect::<std::result::Result<_, _>>()?)
}

pub fn tune_arm(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    base: &PolicyModel,
    records: &[PreferenceRecord],
    kind: LossKind,
) -> Result<TuneOutput> {
    let data = tokenize_records(vocab, records)?;
    Ok(tune(base.thawed(), &base.snapshot_frozen(), &data, &cfg.loss_config(kind), &cfg.train_config())?)
}

/// Source counts of a record set, for manifests.
pub fn source_counts(records: &[PreferenceRecord]) -> [usize; 3] {
    let mut c = [0; 3];
    for r in records {
        c[match r.source {
            PairSource::General => 0,
            PairSource::Atomic => 1,
            PairSource::RandomQa => 2,
        }] += 1;
    }
    c
}

/// Prompts of the token-shift analysis: biographies of held-out entities
/// (in-domain) and every out-of-domain query.
pub fn shift_prompts(world: &World) -> Result<(Vec<Vec<TokenId>>, Vec<Vec<TokenId>>)> {
    let enc = |p: &String| encode_prompt(&world.vocab, p);
    let q = &world.queries;
    let id = q.id_bio.iter().map(|x| enc(&x.prompt)).collect::<std::result::Result<_, _>>()?;
    let ood = q
        .ood_open
        .iter()
        .map(|x| &x.prompt)
        .chain(q.ood_fp.iter().map(|x| &x.prompt))
        .chain(q.ood_kqa.iter().map(|x| &x.prompt))
        .map(enc)
        .collect::<std::result::Result<_, _>>()?;
    Ok((id, ood))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAnalysis {
    pub id_records: Vec<ShiftRecord>,
    pub ood_records: Vec<ShiftRecord>,
    pub id_histogram: ShiftHistogram,
    pub ood_histogram: ShiftHistogram,
    pub diagnosis: Option<DiagnosisReport>,
}

/// Token shift of `tuned` against `base` on in-domain and out-of-domain
/// prompts. The diagnosis is absent when nothing shifted in-domain.
pub fn token_shift(cfg: &ExperimentConfig, world: &World, base: &PolicyModel, tuned: &PolicyModel) -> Result<ShiftAnalysis> {
    let (id_p, ood_p) = shift_prompts(world)?;
    let spec = cfg.eval_spec();
    let id_records = analyze(tuned, base, &id_p, &spec)?;
    let ood_records = analyze(tuned, base, &ood_p, &spec)?;
    let diagnosis = match diagnose(&id_records, &ood_records) {
        Ok(d) => Some(d),
        Err(tokenshift::ShiftError::ZeroIdShift) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ShiftAnalysis {
        id_histogram: histogram(&id_records, 10)?,
        ood_histogram: histogram(&ood_records, 10)?,
        id_records,
        ood_records,
        diagnosis,
    })
}

#[cfg(test)]
mod tests;
