use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::GroundingSample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Reserved entries followed by the sorted distinct tokens.
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a GroundingSample>) -> Self {
        let distinct: BTreeSet<&str> = samples.into_iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(distinct.into_iter().map(str::to_string)).collect();
        Vocabulary::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().filter(|&i| i >= RESERVED.len()).unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word) != UNK
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by token ids, padded with `[PAD]` to `l_max + 1`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], l_max: usize) -> Result<Vec<usize>> {
        if tokens.len() > l_max {
            return Err(Error::Validation(format!("sentence has {} tokens, limit is {l_max}", tokens.len())));
        }
        let mut ids = Vec::with_capacity(l_max + 1);
        ids.push(CLS);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.resize(l_max + 1, PAD);
        Ok(ids)
    }

    /// Words of an encoded sequence, skipping `[CLS]` and `[PAD]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}
