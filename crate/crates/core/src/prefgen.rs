//! General preference construction from sampled responses, plus the
//! quantity and quality grouping used by the data sweeps.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factuality::{factscore, FactualityReport};
use crate::preflosses::TokenPair;
use crate::seed::SeedStream;
use crate::tinylm::{Generation, Generator, ModelError, SampleSpec};
use crate::vocab::{TokenId, Vocab, VocabError};
use crate::world::{encode_prompt, KnowledgeBase};

pub const PREFS_SCHEMA: &str = "faktlab.preferences";

/// Pair counts of the large-model datasets this lab mirrors, kept for scale
/// comparisons in reports.
pub const REFERENCE_PAIR_COUNTS: [(&str, usize); 2] = [("llama-3-8b-instruct", 2777), ("llama-2-7b-chat", 2730)];

#[derive(Debug, Error)]
pub enum PrefgenError {
    #[error("need at least 2 responses per prompt, got {0}")]
    TooFewResponses(usize),
    #[error("quality level {0} is empty")]
    EmptyLevel(QualityLevel),
    #[error("group sizes must be ascending")]
    UnsortedSizes,
    #[error("group size {size} exceeds the dataset size {available}")]
    SizeExceedsDataset { size: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, PrefgenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralPreference {
    pub x: String,
    pub y_w: String,
    pub y_l: String,
    pub f_w: f64,
    pub f_l: f64,
    /// `f_w − f_l`, strictly positive.
    pub q: f64,
    /// Subject of the prompt.
    pub entity: String,
}

impl GeneralPreference {
    pub fn to_tokens(&self, vocab: &Vocab) -> std::result::Result<TokenPair, VocabError> {
        to_token_pair(vocab, &self.x, &self.y_w, &self.y_l)
    }
}

/// `<bos> prompt`, `chosen <eos>`, `rejected <eos>`.
pub fn to_token_pair(vocab: &Vocab, x: &str, y_w: &str, y_l: &str) -> std::result::Result<TokenPair, VocabError> {
    let resp = |s: &str| -> std::result::Result<Vec<TokenId>, VocabError> {
        let mut t = vocab.encode(s)?;
        t.push(vocab.eos());
        Ok(t)
    };
    Ok(TokenPair {
        prompt: encode_prompt(vocab, x)?,
        chosen: resp(y_w)?,
        rejected: resp(y_l)?,
    })
}

/// `n` multinomial samples; sample `i` uses the seed derived from
/// `spec.seed` and index `i`.
pub fn sample_response_set<G: Generator + ?Sized>(
    model: &G,
    prompt: &[TokenId],
    n: usize,
    spec: &SampleSpec,
) -> Result<Vec<Generation>> {
    if n < 2 {
        return Err(PrefgenError::TooFewResponses(n));
    }
    let stream = SeedStream::new(spec.seed).derive("responses");
    (0..n)
        .map(|i| Ok(model.generate(prompt, &spec.with_seed(stream.index(i as u64).key()))?))
        .collect()
}

/// A response text with its factuality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub text: String,
    pub report: FactualityReport,
}

/// All unordered pairs with distinct scores, the higher-scored response
/// preferred. Pairs are emitted in index order `(i, j), i < j`.
pub fn build_pairs(prompt: &str, entity: &str, scored: &[ScoredResponse]) -> Vec<GeneralPreference> {
    let mut out = Vec::new();
    for i in 0..scored.len() {
        for j in i + 1..scored.len() {
            let (a, b) = (&scored[i], &scored[j]);
            if a.report.fs == b.report.fs {
                continue;
            }
            let (w, l) = if a.report.fs > b.report.fs { (a, b) } else { (b, a) };
            out.push(GeneralPreference {
                x: prompt.to_string(),
                y_w: w.text.clone(),
                y_l: l.text.clone(),
                f_w: w.report.fs,
                f_l: l.report.fs,
                q: w.report.fs - l.report.fs,
                entity: entity.to_string(),
            });
        }
    }
    out
}

/// A task prompt about one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPrompt {
    pub entity: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_seed: u64,
    pub responses_per_prompt: usize,
    pub temperature: f64,
    pub num_prompts: usize,
    pub num_pairs: usize,
    pub prompt_entities: BTreeSet<String>,
    /// Mean FActScore of all sampled responses.
    pub mean_response_fs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralDataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<GeneralPreference>,
}

pub fn build_general_dataset<G: Generator + ?Sized>(
    model: &G,
    vocab: &Vocab,
    prompts: &[EntityPrompt],
    n: usize,
    kb: &KnowledgeBase,
    spec: &SampleSpec,
) -> Result<GeneralDataset> {
    if n < 2 {
        return Err(PrefgenError::TooFewResponses(n));
    }
    let stream = SeedStream::new(spec.seed).derive("general-dataset");
    let per_prompt: Vec<(Vec<GeneralPreference>, Vec<f64>)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let toks = encode_prompt(vocab, &p.prompt)?;
            let gens = sample_response_set(model, &toks, n, &spec.with_seed(stream.index(i as u64).key()))?;
            let scored = gens
                .iter()
                .map(|g| {
                    let text = vocab.decode(&g.tokens)?;
                    Ok(ScoredResponse {
                        report: factscore(&text, kb),
                        text,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let fs = scored.iter().map(|s| s.report.fs).collect();
            Ok((build_pairs(&p.prompt, &p.entity, &scored), fs))
        })
        .collect::<Result<_>>()?;
    let all_fs: Vec<f64> = per_prompt.iter().flat_map(|p| p.1.iter().copied()).collect();
    let pairs: Vec<GeneralPreference> = per_prompt.into_iter().flat_map(|p| p.0).collect();
    Ok(GeneralDataset {
        manifest: DatasetManifest {
            sample_seed: spec.seed,
            responses_per_prompt: n,
            temperature: spec.temperature,
            num_prompts: prompts.len(),
            num_pairs: pairs.len(),
            prompt_entities: prompts.iter().map(|p| p.entity.clone()).collect(),
            mean_response_fs: if all_fs.is_empty() {
                0.0
            } else {
                all_fs.iter().sum::<f64>() / all_fs.len() as f64
            },
        },
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityLevel {
    Level1,
    Level2,
    Level3,
    Mixed,
}

impl QualityLevel {
    pub const GRADED: [QualityLevel; 3] = [QualityLevel::Level1, QualityLevel::Level2, QualityLevel::Level3];

    /// Level of a quality score: (0, 0.1], (0.1, 0.2], (0.2, ∞). `None` for q ≤ 0.
    pub fn of(q: f64) -> Option<QualityLevel> {
        if !(q > 0.0) {
            None
        } else if q <= 0.1 {
            Some(QualityLevel::Level1)
        } else if q <= 0.2 {
            Some(QualityLevel::Level2)
        } else {
            Some(QualityLevel::Level3)
        }
    }
}

impl std::fmt::Display for QualityLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QualityLevel::Level1 => "level1",
            QualityLevel::Level2 => "level2",
            QualityLevel::Level3 => "level3",
            QualityLevel::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetGroup<T> {
    pub label: String,
    pub items: Vec<T>,
}

/// Quality of anything carrying a preference gap.
pub trait HasQuality {
    fn quality(&self) -> f64;
}

impl HasQuality for GeneralPreference {
    fn quality(&self) -> f64 {
        self.q
    }
}

/// Four equal-size groups: Level1–3 by `q`, and Mixed drawing evenly from
/// all three levels. Every group is subsampled (seeded, uniform) to the size
/// of the smallest level.
pub fn group_by_quality<T: HasQuality + Clone>(dataset: &[T], seed: u64) -> Result<Vec<DatasetGroup<T>>> {
    let mut levels: Vec<Vec<T>> = vec![Vec::new(); 3];
    for item in dataset {
        if let Some(l) = QualityLevel::of(item.quality()) {
            levels[l as usize].push(item.clone());
        }
    }
    if let Some(i) = levels.iter().position(Vec::is_empty) {
        return Err(PrefgenError::EmptyLevel(QualityLevel::GRADED[i]));
    }
    let size = levels.iter().map(Vec::len).min().expect("three levels");
    let stream = SeedStream::new(seed).derive("quality-groups");
    let shuffled: Vec<Vec<T>> = levels
        .into_iter()
        .enumerate()
        .map(|(i, mut l)| {
            l.shuffle(&mut stream.index(i as u64).rng());
            l
        })
        .collect();
    let mut groups: Vec<DatasetGroup<T>> = QualityLevel::GRADED
        .iter()
        .zip(&shuffled)
        .map(|(lvl, l)| DatasetGroup {
            label: lvl.to_string(),
            items: l[..size].to_vec(),
        })
        .collect();
    // Mixed: round-robin over the levels, taking from the tail of each
    // shuffled level so the pick is independent of the level groups' prefix.
    let mut mixed = Vec::with_capacity(size);
    let mut taken = [0usize; 3];
    let mut rng = stream.derive("mixed").rng();
    let mut level_order = [0usize, 1, 2];
    while mixed.len() < size {
        level_order.shuffle(&mut rng);
        for &l in &level_order {
            if mixed.len() == size {
                break;
            }
            let src = &shuffled[l];
            mixed.push(src[src.len() - 1 - taken[l] % src.len()].clone());
            taken[l] += 1;
        }
    }
    groups.push(DatasetGroup {
        label: QualityLevel::Mixed.to_string(),
        items: mixed,
    });
    Ok(groups)
}

/// Nested groups: one seeded shuffle, then prefixes of the requested sizes.
pub fn subsample_quantity<T: Clone>(dataset: &[T], sizes: &[usize], seed: u64) -> Result<Vec<DatasetGroup<T>>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(PrefgenError::UnsortedSizes);
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > dataset.len()) {
        return Err(PrefgenError::SizeExceedsDataset {
            size: s,
            available: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut SeedStream::new(seed).derive("quantity-groups").rng());
    Ok(sizes
        .iter()
        .map(|&s| DatasetGroup {
            label: format!("n{s}"),
            items: order[..s].iter().map(|&i| dataset[i].clone()).collect(),
        })
        .collect())
}
