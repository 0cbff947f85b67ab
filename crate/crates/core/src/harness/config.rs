//! Versioned experiment configuration. Every stage seed is derived from the
//! single master `seed`, so component sections carry no seeds of their own.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apeft::DetectionConfig;
use crate::optim::OptimizerKind;
use crate::preflosses::{LossConfig, LossKind, TrainConfig};
use crate::seed::SeedStream;
use crate::tinylm::{ModelConfig, PretrainConfig, SampleSpec};
use crate::world::{default_salience, CorpusSpec, FormatMix, QueryConfig, Relation};

use super::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub queries: QueryConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub prefs: PrefsSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub experiment: ArmsSection,
    #[serde(default)]
    pub sweeps: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub num_entities: usize,
    pub preference_entities: usize,
    pub noise_rate: f64,
    pub sentences_per_entity: usize,
    pub rejection_exemplar_rate: f64,
    pub distractor_skew: f64,
    pub salience: BTreeMap<Relation, f64>,
    pub mix: FormatMix,
    pub bio_facts: (usize, usize),
}

impl Default for WorldSection {
    fn default() -> Self {
        let c = CorpusSpec::new(100, 0);
        Self {
            num_entities: 100,
            preference_entities: 60,
            noise_rate: c.noise_rate,
            sentences_per_entity: c.sentences_per_entity,
            rejection_exemplar_rate: c.rejection_exemplar_rate,
            distractor_skew: 2.5,
            salience: default_salience(),
            mix: c.mix,
            bio_facts: c.bio_facts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(1, 0);
        Self {
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            mlp_dim: m.mlp_dim,
            context_len: m.context_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub final_lr_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: 20,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            final_lr_fraction: p.final_lr_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefsSection {
    pub responses_per_prompt: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for PrefsSection {
    fn default() -> Self {
        Self {
            responses_per_prompt: 6,
            temperature: 1.0,
            max_len: 56,
        }
    }
}

/// Loss hyperparameters shared by every loss kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub beta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    pub length_normalized: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::new(LossKind::Dpo);
        Self {
            beta: DESK_BETA,
            tau: l.tau,
            gamma: l.gamma,
            lambda_d: l.lambda_d,
            lambda_u: l.lambda_u,
            length_normalized: l.length_normalized,
        }
    }
}

/// Temperature of the desk-scale tuning runs.
pub const DESK_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk(0);
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub k: usize,
    pub constrained: bool,
    pub temperature: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        let d = DetectionConfig::default();
        Self {
            k: d.k,
            constrained: d.constrained,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_len: 56 }
    }
}

/// Training data of a tuning arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// General preferences only.
    General,
    /// General plus atomic preferences.
    Atom,
    /// General plus random single-fact preferences, as many as `Atom` adds.
    Rand,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::General => "general",
            Arm::Atom => "w/atom",
            Arm::Rand => "w/rand",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Arm::General => "general",
            Arm::Atom => "atom",
            Arm::Rand => "rand",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmsSection {
    pub losses: Vec<LossKind>,
    pub arms: Vec<Arm>,
    /// Loss whose general-only model feeds the token-shift diagnostic.
    pub token_shift_loss: LossKind,
    /// Record every emitted token's ranks (large); the histograms are always written.
    pub write_shift_records: bool,
}

impl Default for ArmsSection {
    fn default() -> Self {
        Self {
            losses: LossKind::ALL.to_vec(),
            arms: vec![Arm::General, Arm::Atom, Arm::Rand],
            token_shift_loss: LossKind::Dpo,
            write_shift_records: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub losses: Vec<LossKind>,
    /// Ascending group sizes; sizes above the dataset are dropped with a note.
    pub quantity_sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            losses: LossKind::ALL.to_vec(),
            quantity_sizes: vec![100, 200, 400, 700],
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            world: WorldSection::default(),
            queries: QueryConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            prefs: PrefsSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            detection: DetectionSection::default(),
            eval: EvalSection::default(),
            experiment: ArmsSection::default(),
            sweeps: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.world.preference_entities == 0 || self.world.preference_entities >= self.world.num_entities {
            return bad(format!(
                "preference_entities must be in 1..{}, got {}",
                self.world.num_entities, self.world.preference_entities
            ));
        }
        self.corpus_spec().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        ModelConfig { vocab_size: 1, ..self.model_config(1) }
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for l in &self.experiment.losses {
            self.loss_config(*l).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.train_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.prefs.responses_per_prompt < 2 {
            return bad("prefs.responses_per_prompt must be at least 2".into());
        }
        if self.detection.k < 2 {
            return bad("detection.k must be at least 2".into());
        }
        for (name, t) in [("prefs", self.prefs.temperature), ("detection", self.detection.temperature)] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name}.temperature must be positive"));
            }
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain epochs and batch_size must be at least 1".into());
        }
        if self.experiment.losses.is_empty() || self.experiment.arms.is_empty() {
            return bad("experiment.losses and experiment.arms must be non-empty".into());
        }
        if self.sweeps.quantity_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweeps.quantity_sizes must be strictly ascending".into());
        }
        Ok(())
    }

    pub fn stream(&self, label: &str) -> SeedStream {
        SeedStream::new(self.seed).derive(label)
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let w = &self.world;
        CorpusSpec {
            num_entities: w.num_entities,
            noise_rate: w.noise_rate,
            sentences_per_entity: w.sentences_per_entity,
            rejection_exemplar_rate: w.rejection_exemplar_rate,
            seed: self.stream("corpus").key(),
            distractor_skew: w.distractor_skew,
            salience: w.salience.clone(),
            mix: w.mix,
            bio_facts: w.bio_facts,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            mlp_dim: m.mlp_dim,
            context_len: m.context_len,
            seed: self.stream("model-init").key(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            final_lr_fraction: p.final_lr_fraction,
            seed: self.stream("pretrain").key(),
        }
    }

    pub fn loss_config(&self, kind: LossKind) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            kind,
            beta: l.beta,
            tau: l.tau,
            gamma: l.gamma,
            lambda_d: l.lambda_d,
            lambda_u: l.lambda_u,
            length_normalized: l.length_normalized,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            seed: self.stream("tune").key(),
            optimizer: t.optimizer,
        }
    }

    pub fn prefs_spec(&self) -> SampleSpec {
        SampleSpec::multinomial(self.prefs.temperature, self.prefs.max_len, self.stream("prefs").key())
    }

    pub fn detection_config(&self) -> DetectionConfig {
        DetectionConfig {
            k: self.detection.k,
            constrained: self.detection.constrained,
        }
    }

    pub fn detection_spec(&self, label: &str) -> SampleSpec {
        SampleSpec::multinomial(self.detection.temperature, 1, self.stream(label).key())
    }

    pub fn eval_spec(&self) -> SampleSpec {
        SampleSpec::greedy(self.eval.max_len)
    }
}
