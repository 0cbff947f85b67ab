//! Run directories: every stage persists its outputs so the command-line
//! stages can run one at a time, and a manifest of file digests makes runs
//! replayable.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apeft::{AtomicBuild, DetectionAudit, PreferenceRecord, RandomQaBuild, DETECTION_AUDIT_SCHEMA};
use crate::prefgen::{DatasetManifest, GeneralDataset, GeneralPreference, PREFS_SCHEMA};
use crate::preflosses::{write_train_log, LossKind};
use crate::records::{load_records, save_records};
use crate::tinylm::{load_checkpoint, save_checkpoint, PolicyModel};
use crate::tokenshift::write_records_csv;
use crate::world::{world_vocab, CorpusRecord, KnowledgeBase, QuerySets, CORPUS_SCHEMA};

use super::{
    arm_dataset, build_atomic, build_prefs, build_random, build_world, evaluate, general_records, pretrain_base,
    render_table, source_counts, token_shift, tune_arm, write_report_csv, Arm, EvalReport, ExperimentConfig,
    HarnessError, ReportRow, Result, ShiftAnalysis, World,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";
pub const DETECTION_FILE: &str = "detection_audit.jsonl";
const MANIFEST_SCHEMA: &str = "faktlab.run-manifest";
const MANIFEST_VERSION: u32 = 1;
const BASE_MODEL: &str = "base";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Splits {
    preference: Vec<String>,
    held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RandomSummary {
    target: usize,
    built: usize,
    shortfall: bool,
}

/// A directory holding one experiment's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|_| HarnessError::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["models", "logs", "evals", "shift"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn need(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(HarnessError::MissingArtifact(p.display().to_string()))
        }
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.path(&format!("models/{name}.ckpt"))
    }

    pub fn arm_model_name(arm: Arm, loss: LossKind) -> String {
        format!("{}_{loss}", arm.slug())
    }

    pub fn save_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::write(self.path("config.toml"), cfg.to_toml())?;
        Ok(())
    }

    pub fn world_gen(&self, cfg: &ExperimentConfig) -> Result<World> {
        let world = build_world(cfg)?;
        self.save_config(cfg)?;
        let mut w = BufWriter::new(File::create(self.path("kb.tsv"))?);
        world.kb.write_tsv(&mut w)?;
        w.flush()?;
        save_records(&self.path("corpus.jsonl"), CORPUS_SCHEMA, &world.corpus)?;
        write_json(&self.path("queries.json"), &world.queries)?;
        write_json(
            &self.path("splits.json"),
            &Splits {
                preference: world.preference_entities.iter().cloned().collect(),
                held_out: world.held_out_entities().into_iter().collect(),
            },
        )?;
        Ok(world)
    }

    pub fn load_world(&self) -> Result<World> {
        let kb = KnowledgeBase::read_tsv(BufReader::new(File::open(self.need("kb.tsv")?)?))?;
        let vocab = world_vocab(&kb)?;
        let corpus: Vec<CorpusRecord> = load_records(&self.need("corpus.jsonl")?, CORPUS_SCHEMA)?;
        let queries: QuerySets = read_json(&self.path("queries.json"))?;
        let splits: Splits = read_json(&self.path("splits.json"))?;
        Ok(World {
            kb,
            vocab,
            corpus,
            preference_entities: splits.preference.into_iter().collect(),
            queries,
        })
    }

    pub fn pretrain(&self, cfg: &ExperimentConfig, world: &World) -> Result<PolicyModel> {
        let (model, log) = pretrain_base(cfg, world)?;
        save_checkpoint(&self.model_path(BASE_MODEL), &model, &world.vocab)?;
        let mut wr = csv::Writer::from_path(self.path("logs/pretrain.csv"))?;
        for r in &log {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(model)
    }

    pub fn load_model(&self, name: &str) -> Result<PolicyModel> {
        Ok(load_checkpoint(&self.need(&format!("models/{name}.ckpt"))?)?.0)
    }

    pub fn load_base(&self) -> Result<PolicyModel> {
        self.load_model(BASE_MODEL)
    }

    pub fn prefs_build(&self, cfg: &ExperimentConfig, world: &World, base: &PolicyModel) -> Result<GeneralDataset> {
        let ds = build_prefs(cfg, world, base)?;
        save_records(&self.path("prefs.jsonl"), PREFS_SCHEMA, &ds.pairs)?;
        write_json(&self.path("prefs_manifest.json"), &ds.manifest)?;
        Ok(ds)
    }

    pub fn load_prefs(&self) -> Result<GeneralDataset> {
        let pairs: Vec<GeneralPreference> = load_records(&self.need("prefs.jsonl")?, PREFS_SCHEMA)?;
        let manifest: DatasetManifest = read_json(&self.path("prefs_manifest.json"))?;
        Ok(GeneralDataset { manifest, pairs })
    }

    pub fn apeft_build(&self, cfg: &ExperimentConfig, world: &World, base: &PolicyModel, prefs: &GeneralDataset) -> Result<AtomicBuild> {
        let b = build_atomic(cfg, world, base, prefs)?;
        save_records(&self.path("atomic.jsonl"), PREFS_SCHEMA, &b.prefs)?;
        save_records(&self.path(DETECTION_FILE), DETECTION_AUDIT_SCHEMA, &b.audit)?;
        Ok(b)
    }

    pub fn load_atomic(&self) -> Result<Vec<PreferenceRecord>> {
        Ok(load_records(&self.need("atomic.jsonl")?, PREFS_SCHEMA)?)
    }

    pub fn load_detection_audit(&self) -> Result<Vec<DetectionAudit>> {
        Ok(load_records(&self.need(DETECTION_FILE)?, DETECTION_AUDIT_SCHEMA)?)
    }

    /// Random single-fact preferences, as many as the atomic file holds
    /// unless `target` says otherwise.
    pub fn randqa_build(
        &self,
        cfg: &ExperimentConfig,
        world: &World,
        base: &PolicyModel,
        prefs: &GeneralDataset,
        target: Option<usize>,
    ) -> Result<RandomQaBuild> {
        let target = match target {
            Some(t) => t,
            None => self.load_atomic()?.len(),
        };
        let b = build_random(cfg, world, base, prefs, target)?;
        save_records(&self.path("randqa.jsonl"), PREFS_SCHEMA, &b.prefs)?;
        save_records(&self.path("randqa_audit.jsonl"), DETECTION_AUDIT_SCHEMA, &b.audit)?;
        write_json(
            &self.path("randqa.json"),
            &RandomSummary {
                target,
                built: b.prefs.len(),
                shortfall: b.shortfall,
            },
        )?;
        Ok(b)
    }

    pub fn load_randqa(&self) -> Result<Vec<PreferenceRecord>> {
        Ok(load_records(&self.need("randqa.jsonl")?, PREFS_SCHEMA)?)
    }

    /// Training records of `arm`, loading the extra data it needs.
    pub fn arm_records(&self, cfg: &ExperimentConfig, arm: Arm, prefs: &GeneralDataset) -> Result<Vec<PreferenceRecord>> {
        let general = general_records(prefs);
        let extra = match arm {
            Arm::General => Vec::new(),
            Arm::Atom => self.load_atomic()?,
            Arm::Rand => self.load_randqa()?,
        };
        Ok(arm_dataset(cfg, arm, &general, &extra).records)
    }

    pub fn tune(
        &self,
        cfg: &ExperimentConfig,
        world: &World,
        base: &PolicyModel,
        records: &[PreferenceRecord],
        arm: Arm,
        loss: LossKind,
    ) -> Result<PolicyModel> {
        let name = Self::arm_model_name(arm, loss);
        let out = tune_arm(cfg, &world.vocab, base, records, loss)?;
        save_checkpoint(&self.model_path(&name), &out.model, &world.vocab)?;
        write_train_log(File::create(self.path(&format!("logs/train_{name}.csv")))?, &out.log)?;
        Ok(out.model)
    }

    pub fn eval(&self, cfg: &ExperimentConfig, world: &World, model: &PolicyModel, name: &str) -> Result<EvalReport> {
        let r = evaluate(model, &world.vocab, &world.kb, &world.queries, &cfg.eval_spec())?;
        write_json(&self.path(&format!("evals/{name}.json")), &r)?;
        Ok(r)
    }

    pub fn load_eval(&self, name: &str) -> Result<EvalReport> {
        read_json(&self.path(&format!("evals/{name}.json")))
    }

    /// Rows for the untuned model and every (arm, loss) with a stored
    /// evaluation, in configuration order.
    pub fn collect_rows(&self, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
        let mut rows = vec![ReportRow::vanilla(self.load_eval(BASE_MODEL)?)];
        for &arm in &cfg.experiment.arms {
            for &loss in &cfg.experiment.losses {
                let name = Self::arm_model_name(arm, loss);
                if self.path(&format!("evals/{name}.json")).exists() {
                    rows.push(ReportRow {
                        arm: arm.name().into(),
                        loss: loss.to_string(),
                        report: self.load_eval(&name)?,
                    });
                }
            }
        }
        Ok(rows)
    }

    pub fn report(&self, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
        let rows = self.collect_rows(cfg)?;
        write_report_csv(&rows, File::create(self.path(REPORT_FILE))?)?;
        fs::write(self.path("report.txt"), render_table(&rows))?;
        Ok(rows)
    }

    pub fn token_shift(
        &self,
        cfg: &ExperimentConfig,
        world: &World,
        base: &PolicyModel,
        tuned: &PolicyModel,
    ) -> Result<ShiftAnalysis> {
        let a = token_shift(cfg, world, base, tuned)?;
        if cfg.experiment.write_shift_records {
            write_records_csv(&a.id_records, File::create(self.path("shift/records_id.csv"))?)?;
            write_records_csv(&a.ood_records, File::create(self.path("shift/records_ood.csv"))?)?;
        }
        for (tag, h) in [("id", &a.id_histogram), ("ood", &a.ood_histogram)] {
            h.write_csv(File::create(self.path(&format!("shift/histogram_{tag}.csv")))?)?;
            fs::write(
                self.path(&format!("shift/histogram_{tag}.svg")),
                h.to_svg(&format!("token shift, {} prompts", tag.to_uppercase())),
            )?;
        }
        let text = match &a.diagnosis {
            Some(d) => format!("{d}\n"),
            None => "no in-domain token shifted; ratio undefined\n".to_string(),
        };
        fs::write(self.path("shift/diagnosis.txt"), text)?;
        write_json(&self.path("shift/diagnosis.json"), &a.diagnosis)?;
        Ok(a)
    }

    /// SHA-256 of every file under the root except the manifest, keyed by
    /// relative path.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&self.root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == MANIFEST_FILE {
                    continue;
                }
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p)?)));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub general: usize,
    pub atomic: usize,
    pub random: usize,
    pub random_shortfall: bool,
    pub facts_probed: usize,
    /// (general, atomic, random) record counts per tuned arm.
    pub arms: BTreeMap<String, [usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub preference_entities: Vec<String>,
    pub held_out_entities: Vec<String>,
    pub dataset_sizes: DatasetSizes,
    /// Parameter digests of every model, by name.
    pub model_digests: BTreeMap<String, String>,
    /// File digests of every artifact, by relative path.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
            return Err(HarnessError::Config(format!(
                "{}: expected {MANIFEST_SCHEMA} v{MANIFEST_VERSION}, found {} v{}",
                path.display(),
                m.schema,
                m.version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<ReportRow>,
    pub shift: ShiftAnalysis,
    pub manifest: RunManifest,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        HarnessError::Config(_) | HarnessError::Stage { .. } => e,
        other => HarnessError::Stage {
            stage: name.to_string(),
            message: other.to_string(),
        },
    })
}

/// World generation through reports, every arm evaluated on the same query
/// sets; writes all artifacts and `manifest.json` under `root`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = stage("setup", RunDir::create(root))?;
    let world = stage("world-gen", dir.world_gen(cfg))?;
    let base = stage("pretrain", dir.pretrain(cfg, &world))?;
    let prefs = stage("prefs-build", dir.prefs_build(cfg, &world, &base))?;
    stage("eval", dir.eval(cfg, &world, &base, BASE_MODEL))?;
    let arms = &cfg.experiment.arms;
    let needs_atomic = arms.iter().any(|a| matches!(a, Arm::Atom | Arm::Rand));
    let atomic = if needs_atomic {
        Some(stage("apeft-build", dir.apeft_build(cfg, &world, &base, &prefs))?)
    } else {
        None
    };
    let random = if arms.contains(&Arm::Rand) {
        let target = atomic.as_ref().map_or(0, |a| a.prefs.len());
        Some(stage("randqa-build", dir.randqa_build(cfg, &world, &base, &prefs, Some(target)))?)
    } else {
        None
    };
    let mut jobs: Vec<(Arm, LossKind)> = Vec::new();
    for &a in arms {
        for &l in &cfg.experiment.losses {
            jobs.push((a, l));
        }
    }
    let records: BTreeMap<Arm, Vec<PreferenceRecord>> = arms
        .iter()
        .map(|&a| Ok((a, dir.arm_records(cfg, a, &prefs)?)))
        .collect::<Result<_>>()?;
    let tuned: Vec<(PolicyModel, EvalReport)> = stage(
        "tune",
        jobs.par_iter()
            .map(|&(arm, loss)| {
                let m = dir.tune(cfg, &world, &base, &records[&arm], arm, loss)?;
                let r = dir.eval(cfg, &world, &m, &RunDir::arm_model_name(arm, loss))?;
                Ok((m, r))
            })
            .collect(),
    )?;
    let shift_loss = cfg.experiment.token_shift_loss;
    let shift_model = match jobs.iter().position(|&j| j == (Arm::General, shift_loss)) {
        Some(i) => tuned[i].0.clone(),
        None => {
            let recs = match records.get(&Arm::General) {
                Some(r) => r.clone(),
                None => general_records(&prefs),
            };
            stage("tune", dir.tune(cfg, &world, &base, &recs, Arm::General, shift_loss))?
        }
    };
    let shift = stage("token-shift", dir.token_shift(cfg, &world, &base, &shift_model))?;
    let rows = stage("report", dir.report(cfg))?;
    let mut model_digests: BTreeMap<String, String> = jobs
        .iter()
        .zip(&tuned)
        .map(|(&(a, l), (m, _))| (RunDir::arm_model_name(a, l), m.params_digest()))
        .collect();
    model_digests.insert(BASE_MODEL.into(), base.params_digest());
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        preference_entities: world.preference_entities.iter().cloned().collect(),
        held_out_entities: world.held_out_entities().into_iter().collect(),
        dataset_sizes: DatasetSizes {
            general: prefs.pairs.len(),
            atomic: atomic.as_ref().map_or(0, |a| a.prefs.len()),
            random: random.as_ref().map_or(0, |r| r.prefs.len()),
            random_shortfall: random.as_ref().is_some_and(|r| r.shortfall),
            facts_probed: atomic.as_ref().map_or(0, |a| a.audit.len()),
            arms: records
                .iter()
                .map(|(a, r)| (a.slug().to_string(), source_counts(r)))
                .collect(),
        },
        model_digests,
        artifacts: stage("manifest", dir.digests())?,
    };
    stage("manifest", write_json(&dir.path(MANIFEST_FILE), &manifest))?;
    Ok(ExperimentOutcome { rows, shift, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub compared: usize,
    /// Artifacts whose digest differs, or that exist on only one side.
    pub mismatched: Vec<String>,
}

impl ReplayCheck {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-runs the manifest's experiment under `root` and compares every
/// artifact digest with the recorded ones.
pub fn replay(manifest: &RunManifest, root: &Path) -> Result<ReplayCheck> {
    let again = run_experiment(&manifest.config, root)?;
    let (a, b) = (&manifest.artifacts, &again.manifest.artifacts);
    let mut mismatched: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .chain(b.keys().filter(|k| !a.contains_key(*k)).cloned())
        .collect();
    for (k, v) in &manifest.model_digests {
        if again.manifest.model_digests.get(k) != Some(v) {
            mismatched.push(format!("model:{k}"));
        }
    }
    Ok(ReplayCheck {
        compared: a.len(),
        mismatched,
    })
}

/// Reads the manifest of a finished run.
pub fn load_manifest(root: &Path) -> Result<RunManifest> {
    RunManifest::load(&root.join(MANIFEST_FILE))
}

impl RunDir {
    pub fn manifest(&self) -> Result<RunManifest> {
        load_manifest(&self.root)
    }
}
