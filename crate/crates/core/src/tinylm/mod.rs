//! A small decoder-only transformer over word-level tokens.
//!
//! The model is a plain flat parameter vector plus a [`ModelConfig`]; all
//! tensors are views into that vector (see `layout`). Inference uses a cached
//! incremental decoder; training uses a full-sequence forward pass that keeps
//! every intermediate needed by the hand-derived reverse pass.
//!
//! The same type serves as the trainable policy and, after
//! [`PolicyModel::snapshot_frozen`], as the immutable reference.

mod checkpoint;
mod decode;
mod forward;
mod layout;
pub(crate) mod linalg;
pub mod pretrain;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::SeedStream;
use crate::vocab::TokenId;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layout::Layout;
pub use pretrain::{pretrain, PretrainConfig, PretrainLog, TrainingExample};

/// Token id of the end-of-sequence marker in every [`crate::vocab::Vocab`].
pub const EOS_ID: TokenId = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context of {len} positions exceeds the window of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("model is frozen")]
    Frozen,
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter vector has {got} entries, config needs {want}")]
    ParamCount { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of the per-layer feed-forward block.
    pub mlp_dim: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 2 heads, window 64.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 128,
            context_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.context_len == 0 || self.mlp_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(&format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }
}

/// Log-probabilities of a response, one entry per response token.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub per_token_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl SequenceScore {
    fn from_tokens(per_token_logprobs: Vec<f64>) -> Self {
        let total_logprob = per_token_logprobs.iter().sum();
        Self {
            per_token_logprobs,
            total_logprob,
        }
    }

    /// Per-token mean, zero for an empty response.
    pub fn mean_logprob(&self) -> f64 {
        if self.per_token_logprobs.is_empty() {
            0.0
        } else {
            self.total_logprob / self.per_token_logprobs.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub strategy: Strategy,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
    /// Token that ends generation (not included in the output).
    #[serde(default = "default_stop")]
    pub stop: Option<TokenId>,
}

fn default_stop() -> Option<TokenId> {
    Some(EOS_ID)
}

impl SampleSpec {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            max_len,
            seed: 0,
            stop: Some(EOS_ID),
        }
    }

    pub fn multinomial(temperature: f64, max_len: usize, seed: u64) -> Self {
        Self {
            strategy: Strategy::Multinomial,
            temperature,
            max_len,
            seed,
            stop: Some(EOS_ID),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Multinomial && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidSpec(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Output of [`PolicyModel::sample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Emitted tokens, without the stop token.
    pub tokens: Vec<TokenId>,
    /// The stop token was produced.
    pub finished: bool,
    /// Generation hit `max_len` or the context window before stopping.
    pub truncated: bool,
}

/// Anything that can continue a prompt. Implemented by [`PolicyModel`] and by
/// scripted stand-ins in tests.
pub trait Generator: Sync {
    fn generate(&self, prompt: &[TokenId], spec: &SampleSpec) -> Result<Generation>;
}

/// Forward trace of one (prompt, response) pair, ready for backpropagation.
pub struct ScoredTrace {
    pub score: SequenceScore,
    trace: forward::Trace,
    rows: Vec<usize>,
    targets: Vec<TokenId>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    params: Vec<f64>,
    frozen: bool,
    layout: Layout,
}

/// Deterministic initialization from `config.seed`.
pub fn init_model(config: ModelConfig) -> Result<PolicyModel> {
    PolicyModel::init(config)
}

impl PolicyModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = SeedStream::new(config.seed).derive("init").rng();
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        let d = config.embed_dim;
        let zero = |p: &mut Vec<f64>, at: usize, n: usize| p[at..at + n].iter_mut().for_each(|x| *x = 0.0);
        let resid_scale = 1.0 / ((2 * config.num_layers.max(1)) as f64).sqrt();
        for lo in layout.layers.clone() {
            zero(&mut params, lo.ln1_b, d);
            zero(&mut params, lo.ln2_b, d);
            zero(&mut params, lo.b1, config.mlp_dim);
            zero(&mut params, lo.b2, d);
            for x in &mut params[lo.wo..lo.wo + d * d] {
                *x *= resid_scale;
            }
            for x in &mut params[lo.w2..lo.w2 + config.mlp_dim * d] {
                *x *= resid_scale;
            }
        }
        zero(&mut params, layout.lnf_b, d);
        zero(&mut params, layout.b_out, config.vocab_size);
        for r in layout.gain_ranges(d) {
            params[r].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(Self {
            config,
            params,
            frozen: false,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ParamCount {
                got: params.len(),
                want: layout.total,
            });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            params,
            frozen,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable parameters; refused for frozen snapshots.
    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        Ok(&mut self.params)
    }

    /// Range of the output projection weights followed by its bias.
    pub fn output_range(&self) -> std::ops::Range<usize> {
        self.layout.w_out..self.layout.b_out + self.config.vocab_size
    }

    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        self.layout.b_out..self.layout.b_out + self.config.vocab_size
    }

    /// Deep copy marked frozen.
    pub fn snapshot_frozen(&self) -> PolicyModel {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// Trainable copy of a (possibly frozen) model.
    pub fn thawed(&self) -> PolicyModel {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn params_digest(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.params {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, toks: &[TokenId]) -> Result<()> {
        match toks.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ModelError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    fn check_window(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(ModelError::EmptyContext);
        }
        if len > self.config.context_len {
            return Err(ModelError::ContextTooLong {
                len,
                max: self.config.context_len,
            });
        }
        Ok(())
    }

    /// Distribution over the vocabulary for the token following `context`.
    pub fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.check_window(context.len())?;
        self.check_tokens(context)?;
        let mut st = decode::DecodeState::new(&self.config);
        let mut logits = Vec::new();
        for &t in context {
            logits = decode::step(&self.config, &self.layout, &self.params, &mut st, t);
        }
        linalg::softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Next-token distributions after every prefix of `tokens`: entry `i` is
    /// the distribution given `tokens[..=i]`.
    pub fn position_dists(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.check_window(tokens.len())?;
        self.check_tokens(tokens)?;
        let tr = forward::forward(&self.config, &self.layout, &self.params, tokens);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = forward::logits_at(&self.config, &self.layout, &self.params, &tr, &rows);
        Ok(logits
            .chunks(self.config.vocab_size)
            .map(|c| {
                let mut v = c.to_vec();
                linalg::softmax_in_place(&mut v);
                v
            })
            .collect())
    }

    /// Runs the forward pass needed to score `response` after `prompt` and
    /// keeps it for [`Self::backprop`].
    pub fn trace(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<ScoredTrace> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let n = response.len();
        let mut inputs = prompt.to_vec();
        if n > 1 {
            inputs.extend_from_slice(&response[..n - 1]);
        }
        self.check_window(inputs.len())?;
        self.check_tokens(&inputs)?;
        self.check_tokens(response)?;
        let tr = forward::forward(&self.config, &self.layout, &self.params, &inputs);
        let rows: Vec<usize> = (0..n).map(|i| prompt.len() - 1 + i).collect();
        let mut probs = forward::logits_at(&self.config, &self.layout, &self.params, &tr, &rows);
        let vsz = self.config.vocab_size;
        let mut lps = Vec::with_capacity(n);
        for (i, &t) in response.iter().enumerate() {
            let row = &mut probs[i * vsz..(i + 1) * vsz];
            lps.push(linalg::log_softmax_at(row, t as usize));
            linalg::softmax_in_place(row);
        }
        Ok(ScoredTrace {
            score: SequenceScore::from_tokens(lps),
            trace: tr,
            rows,
            targets: response.to_vec(),
            probs,
        })
    }

    /// Accumulates `coef · ∂(total_logprob)/∂θ` of a traced pair into `grad`.
    pub fn backprop(&self, st: &ScoredTrace, coef: f64, grad: &mut [f64]) -> Result<()> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        assert_eq!(grad.len(), self.params.len());
        if st.rows.is_empty() || coef == 0.0 {
            return Ok(());
        }
        let vsz = self.config.vocab_size;
        let mut dlogits: Vec<f64> = st.probs.iter().map(|p| -coef * p).collect();
        for (i, &t) in st.targets.iter().enumerate() {
            dlogits[i * vsz + t as usize] += coef;
        }
        forward::backward(&self.config, &self.layout, &self.params, &st.trace, &st.rows, &dlogits, grad);
        Ok(())
    }

    /// `Σ log p(response_i | prompt, response_<i)`.
    pub fn sequence_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<SequenceScore> {
        if response.is_empty() {
            self.check_tokens(prompt)?;
            return Ok(SequenceScore::from_tokens(Vec::new()));
        }
        Ok(self.trace(prompt, response)?.score)
    }

    /// Gradient of `sequence_logprob(prompt, response).total_logprob` w.r.t. θ.
    pub fn grad_sequence_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        let mut grad = vec![0.0; self.params.len()];
        if !response.is_empty() {
            let st = self.trace(prompt, response)?;
            self.backprop(&st, 1.0, &mut grad)?;
        }
        Ok(grad)
    }

    /// Autoregressive generation; see [`SampleSpec`].
    pub fn sample(&self, prompt: &[TokenId], spec: &SampleSpec) -> Result<Generation> {
        spec.validate()?;
        self.check_window(prompt.len())?;
        self.check_tokens(prompt)?;
        let mut rng = SeedStream::new(spec.seed).derive("sample").rng();
        let mut st = decode::DecodeState::new(&self.config);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = decode::step(&self.config, &self.layout, &self.params, &mut st, t);
        }
        let mut out = Vec::new();
        loop {
            if out.len() >= spec.max_len {
                return Ok(Generation { tokens: out, finished: false, truncated: true });
            }
            let tok = match spec.strategy {
                Strategy::Greedy => argmax(&logits),
                Strategy::Multinomial => {
                    let mut p: Vec<f64> = logits.iter().map(|l| l / spec.temperature).collect();
                    linalg::softmax_in_place(&mut p);
                    draw(&p, rng.gen::<f64>())
                }
            };
            if Some(tok) == spec.stop {
                return Ok(Generation { tokens: out, finished: true, truncated: false });
            }
            out.push(tok);
            if st.len() >= self.config.context_len {
                return Ok(Generation { tokens: out, finished: false, truncated: true });
            }
            logits = decode::step(&self.config, &self.layout, &self.params, &mut st, tok);
        }
    }
}

impl Generator for PolicyModel {
    fn generate(&self, prompt: &[TokenId], spec: &SampleSpec) -> Result<Generation> {
        self.sample(prompt, spec)
    }
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax(v: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Inverse-CDF draw from a normalized distribution given `u ∈ [0,1)`.
pub fn draw(p: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i as TokenId;
        }
    }
    // rounding slack: last token with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0) as TokenId
}
