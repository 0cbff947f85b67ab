//! The synthetic fact world: knowledge base, templated language, noisy
//! pretraining corpus, and the in-domain / out-of-domain query sets.

mod corpus;
pub mod grammar;
mod kb;
mod queries;

use thiserror::Error;

pub use corpus::{
    default_salience, gen_corpus, realized_noise, CorpusRecord, CorpusSpec, FormatMix, Judged, RecordKind,
};
pub use grammar::{Relation, Triple};
pub use kb::{entity_names, gen_kb, KnowledgeBase};
pub use queries::{
    gen_queries, gen_queries_with, split_entities, BioQuery, FalsePremiseQuery, OodEntities, OpenQuery, QueryConfig,
    QuerySets, ShortQaQuery,
};

use crate::tinylm::TrainingExample;
use crate::vocab::{Vocab, VocabError};

pub const CORPUS_SCHEMA: &str = "faktlab.corpus";
pub const QUERIES_SCHEMA: &str = "faktlab.queries";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("invalid knowledge base: {0}")]
    InvalidKb(String),
    #[error("entity {0:?} is not in the knowledge base")]
    UnknownEntity(String),
    #[error("preference entities leave no held-out entity")]
    NoHeldOutEntities,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vocabulary covering every word the world can produce: template literals,
/// all object pools, and the KB's entity names.
pub fn world_vocab(kb: &KnowledgeBase) -> Result<Vocab, WorldError> {
    let mut words: Vec<String> = grammar::literal_words().into_iter().map(String::from).collect();
    for r in Relation::ALL {
        words.extend(r.pool().iter().map(|s| s.to_string()));
    }
    words.extend(kb.entities().iter().cloned());
    Ok(Vocab::new(words)?)
}

/// Encodes a prompt as `<bos> prompt` and a response as `response <eos>`.
pub fn encode_example(vocab: &Vocab, prompt: &str, response: &str) -> Result<TrainingExample, VocabError> {
    let mut p = vec![vocab.bos()];
    p.extend(vocab.encode(prompt)?);
    let mut r = vocab.encode(response)?;
    r.push(vocab.eos());
    Ok(TrainingExample { prompt: p, response: r })
}

/// Encodes a prompt for generation: `<bos> prompt`.
pub fn encode_prompt(vocab: &Vocab, prompt: &str) -> Result<Vec<crate::vocab::TokenId>, VocabError> {
    let mut p = vec![vocab.bos()];
    p.extend(vocab.encode(prompt)?);
    Ok(p)
}

pub fn corpus_examples(vocab: &Vocab, corpus: &[CorpusRecord]) -> Result<Vec<TrainingExample>, VocabError> {
    corpus
        .iter()
        .map(|r| encode_example(vocab, &r.prompt, &r.response))
        .collect()
}
