//! Word-level vocabulary over the closed templated language.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const TRUE: &str = "<true>";
pub const FALSE: &str = "<false>";
pub const PREMISE_FALSE: &str = "<premise-false>";

/// Special tokens, in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 6] = [BOS, EOS, PAD, TRUE, FALSE, PREMISE_FALSE];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("unknown token {0:?}")]
    Unknown(String),
    #[error("token id {0} out of range")]
    OutOfRange(TokenId),
    #[error("token {0:?} contains whitespace")]
    Whitespace(String),
    #[error("special token {0:?} missing or misplaced")]
    Specials(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary with the special tokens first, followed by `words`
    /// in the given order.
    pub fn new<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from a full token list (specials included), as
    /// stored in checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(VocabError::Specials(s.to_string()));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(VocabError::Whitespace(t.clone()));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::Unknown(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::OutOfRange(id))
    }

    pub fn bos(&self) -> TokenId {
        0
    }
    pub fn eos(&self) -> TokenId {
        1
    }
    pub fn pad(&self) -> TokenId {
        2
    }
    pub fn true_id(&self) -> TokenId {
        3
    }
    pub fn false_id(&self) -> TokenId {
        4
    }
    pub fn premise_false(&self) -> TokenId {
        5
    }

    /// Splits on whitespace and maps every word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>, VocabError> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Joins tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words: Result<Vec<&str>, _> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = VocabError;
    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
