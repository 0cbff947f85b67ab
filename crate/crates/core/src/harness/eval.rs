//! In-domain and out-of-domain evaluation of one model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::factuality::factscore;
use crate::tinylm::{Generator, SampleSpec};
use crate::vocab::{Vocab, PREMISE_FALSE};
use crate::world::{encode_prompt, FalsePremiseQuery, KnowledgeBase, QuerySets, ShortQaQuery};

use super::Result;

/// Mean FActScore, supported and contradicted counts over a prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongFormMetrics {
    pub fs: f64,
    pub nc: f64,
    pub ne: f64,
    /// Responses with no parsed fact.
    pub empty: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bio: LongFormMetrics,
    pub fava_like: LongFormMetrics,
    pub fp_acc: f64,
    pub kqa_acc: f64,
    /// Unweighted mean of the two FActScores and the two accuracies.
    pub avg: f64,
}

impl EvalReport {
    pub fn new(bio: LongFormMetrics, fava_like: LongFormMetrics, fp_acc: f64, kqa_acc: f64) -> Self {
        Self {
            avg: (bio.fs + fava_like.fs + fp_acc + kqa_acc) / 4.0,
            bio,
            fava_like,
            fp_acc,
            kqa_acc,
        }
    }

    /// Column names of [`Self::values`].
    pub const COLUMNS: [&'static str; 9] = [
        "bio_fs", "bio_nc", "bio_ne", "fava_fs", "fava_nc", "fava_ne", "fp_acc", "kqa_acc", "avg",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.bio.fs,
            self.bio.nc,
            self.bio.ne,
            self.fava_like.fs,
            self.fava_like.nc,
            self.fava_like.ne,
            self.fp_acc,
            self.kqa_acc,
            self.avg,
        ]
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

fn respond<G: Generator + ?Sized>(model: &G, vocab: &Vocab, prompt: &str, spec: &SampleSpec) -> Result<String> {
    let toks = encode_prompt(vocab, prompt)?;
    let gen = model.generate(&toks, spec)?;
    Ok(vocab.decode(&gen.tokens)?)
}

/// Greedy (per `spec`) responses scored against the KB; per-response
/// fs/nc/ne averaged over prompts.
pub fn eval_long_form<G: Generator + ?Sized>(
    model: &G,
    vocab: &Vocab,
    prompts: &[String],
    kb: &KnowledgeBase,
    spec: &SampleSpec,
) -> Result<LongFormMetrics> {
    let reports = prompts
        .par_iter()
        .map(|p| Ok(factscore(&respond(model, vocab, p, spec)?, kb)))
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len();
    Ok(LongFormMetrics {
        fs: mean(reports.iter().map(|r| r.fs), n),
        nc: mean(reports.iter().map(|r| r.nc as f64), n),
        ne: mean(reports.iter().map(|r| r.ne as f64), n),
        empty: reports.iter().filter(|r| r.empty).count(),
    })
}

/// Fraction of responses that open with the premise-rejection marker.
pub fn eval_false_premise<G: Generator + ?Sized>(
    model: &G,
    vocab: &Vocab,
    queries: &[FalsePremiseQuery],
    spec: &SampleSpec,
) -> Result<f64> {
    let marker = vocab.premise_false();
    let hits = queries
        .par_iter()
        .map(|q| {
            let toks = encode_prompt(vocab, &q.prompt)?;
            Ok(model.generate(&toks, spec)?.tokens.first() == Some(&marker))
        })
        .collect::<Result<Vec<bool>>>()?;
    debug_assert_eq!(vocab.token(marker).ok(), Some(PREMISE_FALSE));
    Ok(mean(hits.iter().map(|&h| h as u8 as f64), hits.len()))
}

/// Case-folded, punctuation stripped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() || c == '-' || c == '_' { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The normalized gold occurs in the normalized response as whole words.
pub fn short_answer_correct(response: &str, gold: &str) -> bool {
    let (r, g) = (normalize_answer(response), normalize_answer(gold));
    if g.is_empty() {
        return false;
    }
    let (rw, gw): (Vec<&str>, Vec<&str>) = (r.split(' ').collect(), g.split(' ').collect());
    rw.windows(gw.len()).any(|w| w == gw.as_slice())
}

pub fn eval_short_qa<G: Generator + ?Sized>(
    model: &G,
    vocab: &Vocab,
    queries: &[ShortQaQuery],
    spec: &SampleSpec,
) -> Result<f64> {
    let hits = queries
        .par_iter()
        .map(|q| Ok(short_answer_correct(&respond(model, vocab, &q.prompt, spec)?, &q.gold)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(mean(hits.iter().map(|&h| h as u8 as f64), hits.len()))
}

/// All four sets under one decoding spec.
pub fn evaluate<G: Generator + ?Sized>(
    model: &G,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    queries: &QuerySets,
    spec: &SampleSpec,
) -> Result<EvalReport> {
    let bio: Vec<String> = queries.id_bio.iter().map(|q| q.prompt.clone()).collect();
    let open: Vec<String> = queries.ood_open.iter().map(|q| q.prompt.clone()).collect();
    Ok(EvalReport::new(
        eval_long_form(model, vocab, &bio, kb, spec)?,
        eval_long_form(model, vocab, &open, kb, spec)?,
        eval_false_premise(model, vocab, &queries.ood_fp, spec)?,
        eval_short_qa(model, vocab, &queries.ood_kqa, spec)?,
    ))
}
