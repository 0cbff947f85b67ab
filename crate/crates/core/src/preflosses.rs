//! Reward-free preference objectives (DPO, IPO, paired KTO, CPO, hinge/RSO)
//! and the tuning loop that applies them to a [`PolicyModel`].
//!
//! Every loss is a function of four sequence log-probabilities. Gradients
//! with respect to θ are obtained by chaining the loss's partial derivatives
//! in the two policy log-probabilities through
//! [`PolicyModel::backprop`]; the reference terms are constants.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{accumulate, l2_norm, Optimizer, OptimizerKind};
use crate::seed::SeedStream;
use crate::tinylm::{ModelError, PolicyModel, ScoredTrace};
use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("invalid loss config: {0}")]
    InvalidLoss(String),
    #[error("invalid train config: {0}")]
    InvalidTrain(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty preference dataset")]
    EmptyDataset,
    #[error("reference model must be frozen")]
    ReferenceNotFrozen,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PrefError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Ipo,
    Kto,
    Cpo,
    Rso,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Dpo, LossKind::Ipo, LossKind::Kto, LossKind::Cpo, LossKind::Rso];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::Kto => "kto",
            LossKind::Cpo => "cpo",
            LossKind::Rso => "rso",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown loss kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Deviation strength for DPO, KTO and CPO.
    pub beta: f64,
    /// IPO regularization; the target log-ratio gap is `1/(2τ)`.
    pub tau: f64,
    /// RSO hinge scale.
    pub gamma: f64,
    /// KTO weight on desirable (chosen) responses.
    pub lambda_d: f64,
    /// KTO weight on undesirable (rejected) responses.
    pub lambda_u: f64,
    /// Use per-token mean log-probabilities instead of sequence sums.
    #[serde(default)]
    pub length_normalized: bool,
}

impl LossConfig {
    /// β = τ = γ = 0.1, λ_D = λ_U = 1.
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            beta: 0.1,
            tau: 0.1,
            gamma: 0.1,
            lambda_d: 1.0,
            lambda_u: 1.0,
            length_normalized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("tau", self.tau),
            ("gamma", self.gamma),
            ("lambda_d", self.lambda_d),
            ("lambda_u", self.lambda_u),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PrefError::InvalidLoss(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogprobs {
    pub lw_pol: f64,
    pub ll_pol: f64,
    pub lw_ref: f64,
    pub ll_ref: f64,
}

impl PairLogprobs {
    pub fn new(lw_pol: f64, ll_pol: f64, lw_ref: f64, ll_ref: f64) -> Self {
        Self {
            lw_pol,
            ll_pol,
            lw_ref,
            ll_ref,
        }
    }

    fn chosen_ratio(&self) -> f64 {
        self.lw_pol - self.lw_ref
    }

    fn rejected_ratio(&self) -> f64 {
        self.ll_pol - self.ll_ref
    }

    /// `(lw_pol − lw_ref) − (ll_pol − ll_ref)`.
    pub fn margin(&self) -> f64 {
        self.chosen_ratio() - self.rejected_ratio()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub value: f64,
    pub d_lw_pol: f64,
    pub d_ll_pol: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow; equals `−log σ(−x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn dpo_loss(p: &PairLogprobs, c: &LossConfig) -> LossOutput {
    let z = c.beta * p.margin();
    let d = -c.beta * sigmoid(-z);
    LossOutput {
        value: softplus(-z),
        d_lw_pol: d,
        d_ll_pol: -d,
    }
}

pub fn ipo_loss(p: &PairLogprobs, c: &LossConfig) -> LossOutput {
    let gap = p.margin() - 1.0 / (2.0 * c.tau);
    LossOutput {
        value: gap * gap,
        d_lw_pol: 2.0 * gap,
        d_ll_pol: -2.0 * gap,
    }
}

pub fn cpo_loss(p: &PairLogprobs, c: &LossConfig) -> LossOutput {
    let z = c.beta * (p.lw_pol - p.ll_pol);
    let d = -c.beta * sigmoid(-z);
    LossOutput {
        value: softplus(-z) - p.lw_pol,
        d_lw_pol: d - 1.0,
        d_ll_pol: -d,
    }
}

pub fn rso_loss(p: &PairLogprobs, c: &LossConfig) -> LossOutput {
    let h = 1.0 - c.gamma * p.margin();
    let d = if h > 0.0 { -c.gamma } else { 0.0 };
    LossOutput {
        value: h.max(0.0),
        d_lw_pol: d,
        d_ll_pol: -d,
    }
}

/// Batch-level KL estimates shared by every pair in a paired-KTO batch.
struct KtoKl {
    chosen: f64,
    rejected: f64,
    chosen_active: bool,
    rejected_active: bool,
}

impl KtoKl {
    fn of(batch: &[PairLogprobs]) -> Self {
        let n = batch.len() as f64;
        let cm = batch.iter().map(|q| q.chosen_ratio()).sum::<f64>() / n;
        let rm = batch.iter().map(|q| q.rejected_ratio()).sum::<f64>() / n;
        Self {
            chosen: cm.max(0.0),
            rejected: rm.max(0.0),
            chosen_active: cm > 0.0,
            rejected_active: rm > 0.0,
        }
    }
}

/// Value of one pair's paired-KTO term plus the slopes `s_a = σ'(a)`,
/// `s_b = σ'(b)` used for derivatives.
fn kto_term(p: &PairLogprobs, c: &LossConfig, kl: &KtoKl) -> (f64, f64, f64) {
    let sa = sigmoid(c.beta * (p.chosen_ratio() - kl.rejected));
    let sb = sigmoid(c.beta * (kl.chosen - p.rejected_ratio()));
    let value = (c.lambda_d * (1.0 - sa) + c.lambda_u * (1.0 - sb)) / 2.0;
    (value, sa * (1.0 - sa), sb * (1.0 - sb))
}

/// Paired KTO with batch-mean KL estimates clamped at zero. The estimates
/// depend on every pair in `batch`; the derivatives returned are the total
/// derivatives of this pair's value with respect to its own log-probabilities.
pub fn kto_pair_loss(p: &PairLogprobs, c: &LossConfig, batch: &[PairLogprobs]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(PrefError::EmptyBatch);
    }
    let kl = KtoKl::of(batch);
    let (value, sa, sb) = kto_term(p, c, &kl);
    let n = batch.len() as f64;
    let half_beta = c.beta / 2.0;
    let mut d_lw = -c.lambda_d * sa * half_beta;
    let mut d_ll = c.lambda_u * sb * half_beta;
    if kl.chosen_active {
        d_lw -= c.lambda_u * sb * half_beta / n;
    }
    if kl.rejected_active {
        d_ll += c.lambda_d * sa * half_beta / n;
    }
    Ok(LossOutput {
        value,
        d_lw_pol: d_lw,
        d_ll_pol: d_ll,
    })
}

/// Single-pair loss for any kind; KTO uses the pair as its own batch.
pub fn pair_loss(p: &PairLogprobs, c: &LossConfig) -> LossOutput {
    match c.kind {
        LossKind::Dpo => dpo_loss(p, c),
        LossKind::Ipo => ipo_loss(p, c),
        LossKind::Kto => kto_pair_loss(p, c, std::slice::from_ref(p)).expect("non-empty"),
        LossKind::Cpo => cpo_loss(p, c),
        LossKind::Rso => rso_loss(p, c),
    }
}

/// Mean loss over a batch and its derivatives with respect to every pair's
/// policy log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub d_lw_pol: Vec<f64>,
    pub d_ll_pol: Vec<f64>,
}

pub fn batch_loss(batch: &[PairLogprobs], c: &LossConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(PrefError::EmptyBatch);
    }
    let n = batch.len() as f64;
    if c.kind != LossKind::Kto {
        let outs: Vec<LossOutput> = batch.iter().map(|p| pair_loss(p, c)).collect();
        return Ok(BatchLoss {
            value: outs.iter().map(|o| o.value).sum::<f64>() / n,
            d_lw_pol: outs.iter().map(|o| o.d_lw_pol / n).collect(),
            d_ll_pol: outs.iter().map(|o| o.d_ll_pol / n).collect(),
        });
    }
    let kl = KtoKl::of(batch);
    let terms: Vec<(f64, f64, f64)> = batch.iter().map(|p| kto_term(p, c, &kl)).collect();
    let half_beta = c.beta / 2.0;
    // every pair moves the shared KL estimates by 1/n of its log-ratio
    let via_chosen_kl = if kl.chosen_active {
        -terms.iter().map(|t| c.lambda_u * t.2 * half_beta).sum::<f64>() / n
    } else {
        0.0
    };
    let via_rejected_kl = if kl.rejected_active {
        terms.iter().map(|t| c.lambda_d * t.1 * half_beta).sum::<f64>() / n
    } else {
        0.0
    };
    Ok(BatchLoss {
        value: terms.iter().map(|t| t.0).sum::<f64>() / n,
        d_lw_pol: terms
            .iter()
            .map(|t| (-c.lambda_d * t.1 * half_beta + via_chosen_kl) / n)
            .collect(),
        d_ll_pol: terms
            .iter()
            .map(|t| (c.lambda_u * t.2 * half_beta + via_rejected_kl) / n)
            .collect(),
    })
}

/// A preference pair in token form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

/// Reference log-probabilities of a pair's two responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefLogprobs {
    pub chosen: f64,
    pub rejected: f64,
}

fn seq_value(total: f64, len: usize, normalized: bool) -> f64 {
    if normalized && len > 0 {
        total / len as f64
    } else {
        total
    }
}

/// Scores every pair under a (reference) model.
pub fn reference_logprobs(reference: &PolicyModel, pairs: &[TokenPair], c: &LossConfig) -> Result<Vec<RefLogprobs>> {
    pairs
        .par_iter()
        .map(|p| {
            let w = reference.sequence_logprob(&p.prompt, &p.chosen)?;
            let l = reference.sequence_logprob(&p.prompt, &p.rejected)?;
            Ok(RefLogprobs {
                chosen: seq_value(w.total_logprob, p.chosen.len(), c.length_normalized),
                rejected: seq_value(l.total_logprob, p.rejected.len(), c.length_normalized),
            })
        })
        .collect()
}

/// Mean loss of `pairs` under `policy`, without gradients.
pub fn loss_value(policy: &PolicyModel, pairs: &[TokenPair], refs: &[RefLogprobs], c: &LossConfig) -> Result<f64> {
    let lps: Vec<PairLogprobs> = pairs
        .par_iter()
        .zip(refs)
        .map(|(p, r)| {
            let w = policy.sequence_logprob(&p.prompt, &p.chosen)?;
            let l = policy.sequence_logprob(&p.prompt, &p.rejected)?;
            Ok(PairLogprobs::new(
                seq_value(w.total_logprob, p.chosen.len(), c.length_normalized),
                seq_value(l.total_logprob, p.rejected.len(), c.length_normalized),
                r.chosen,
                r.rejected,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(batch_loss(&lps, c)?.value)
}

/// Mean loss of `pairs` and its gradient with respect to the policy parameters.
pub fn loss_and_grad(
    policy: &PolicyModel,
    pairs: &[TokenPair],
    refs: &[RefLogprobs],
    c: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    assert_eq!(pairs.len(), refs.len());
    let traces: Vec<(ScoredTrace, ScoredTrace)> = pairs
        .par_iter()
        .map(|p| Ok((policy.trace(&p.prompt, &p.chosen)?, policy.trace(&p.prompt, &p.rejected)?)))
        .collect::<Result<_>>()?;
    let lps: Vec<PairLogprobs> = traces
        .iter()
        .zip(pairs)
        .zip(refs)
        .map(|(((w, l), p), r)| {
            PairLogprobs::new(
                seq_value(w.score.total_logprob, p.chosen.len(), c.length_normalized),
                seq_value(l.score.total_logprob, p.rejected.len(), c.length_normalized),
                r.chosen,
                r.rejected,
            )
        })
        .collect();
    let bl = batch_loss(&lps, c)?;
    let items: Vec<(&ScoredTrace, f64)> = traces
        .iter()
        .zip(pairs)
        .enumerate()
        .flat_map(|(i, ((w, l), p))| {
            [
                (w, seq_value(bl.d_lw_pol[i], p.chosen.len(), c.length_normalized)),
                (l, seq_value(bl.d_ll_pol[i], p.rejected.len(), c.length_normalized)),
            ]
        })
        .collect();
    let (grad, _) = accumulate(&items, policy.params().len(), |(t, coef), g| policy.backprop(t, *coef, g))?;
    Ok((bl.value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    /// Desk-scale preset: 3 epochs, lr 3e-5, batch 8, no accumulation. Larger
    /// rates overwrite the pretrained knowledge of the tiny model.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 3,
            learning_rate: 3e-5,
            batch_size: 8,
            grad_accum: 1,
            seed,
            optimizer: OptimizerKind::Adamw,
        }
    }

    /// The large-model recipe: 3 epochs, lr 1e-6, batch 4, accumulation 4.
    pub fn large_model(seed: u64) -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-6,
            batch_size: 4,
            grad_accum: 4,
            seed,
            optimizer: OptimizerKind::Adamw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(PrefError::InvalidTrain("epochs, batch_size and grad_accum must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PrefError::InvalidTrain(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Optimizer updates for a dataset of `n` pairs.
    pub fn num_updates(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size * self.grad_accum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub loss_value: f64,
    pub grad_norm: f64,
}

pub struct TuneOutput {
    pub model: PolicyModel,
    pub log: Vec<TrainLogRow>,
}

/// Preference tuning. Reference log-probabilities are computed once; each
/// update averages the gradients of `grad_accum` micro-batches of
/// `batch_size` pairs, and the logged loss is the mean micro-batch loss.
pub fn tune(
    model: PolicyModel,
    reference: &PolicyModel,
    dataset: &[TokenPair],
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TuneOutput> {
    if !reference.is_frozen() {
        return Err(PrefError::ReferenceNotFrozen);
    }
    if dataset.is_empty() {
        return Err(PrefError::EmptyDataset);
    }
    loss_cfg.validate()?;
    train_cfg.validate()?;
    let mut model = model;
    if model.is_frozen() {
        return Err(PrefError::Model(ModelError::Frozen));
    }
    let refs = reference_logprobs(reference, dataset, loss_cfg)?;
    let mut opt = Optimizer::new(train_cfg.optimizer, model.params().len());
    let stream = SeedStream::new(train_cfg.seed).derive("tune");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(train_cfg.num_updates(dataset.len()));
    let per_update = train_cfg.batch_size * train_cfg.grad_accum;
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut stream.index(epoch as u64).rng());
        for chunk in order.chunks(per_update) {
            let mut grad = vec![0.0; model.params().len()];
            let mut loss = 0.0;
            let micro: Vec<&[usize]> = chunk.chunks(train_cfg.batch_size).collect();
            for mb in &micro {
                let pairs: Vec<TokenPair> = mb.iter().map(|&i| dataset[i].clone()).collect();
                let rs: Vec<RefLogprobs> = mb.iter().map(|&i| refs[i]).collect();
                let (v, g) = loss_and_grad(&model, &pairs, &rs, loss_cfg)?;
                loss += v;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let k = micro.len() as f64;
            grad.iter_mut().for_each(|g| *g /= k);
            let grad_norm = l2_norm(&grad);
            opt.step(model.params_mut()?, &grad, train_cfg.learning_rate);
            log.push(TrainLogRow {
                step: log.len(),
                epoch,
                loss_kind: loss_cfg.kind,
                loss_value: loss / k,
                grad_norm,
            });
        }
    }
    Ok(TuneOutput { model, log })
}

pub fn write_train_log<W: Write>(w: W, rows: &[TrainLogRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
