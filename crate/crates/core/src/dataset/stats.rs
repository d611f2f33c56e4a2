use std::fmt;

use serde::{Deserialize, Serialize};

use super::GroundingSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_sentences: usize,
    pub num_phrases: usize,
    pub phrases_per_sentence: f64,
    pub avg_phrase_len: f64,
}

impl DatasetStats {
    pub fn from_counts(num_sentences: usize, num_phrases: usize, phrase_tokens: usize) -> Result<Self> {
        if num_sentences == 0 {
            return Err(Error::Validation("statistics need at least one sentence".into()));
        }
        Ok(DatasetStats {
            num_sentences,
            num_phrases,
            phrases_per_sentence: num_phrases as f64 / num_sentences as f64,
            avg_phrase_len: if num_phrases == 0 { 0.0 } else { phrase_tokens as f64 / num_phrases as f64 },
        })
    }
}

pub fn dataset_stats<'a>(samples: impl IntoIterator<Item = &'a GroundingSample>) -> Result<DatasetStats> {
    let (mut n, mut k, mut toks) = (0, 0, 0);
    for s in samples {
        n += 1;
        k += s.phrases.len();
        toks += s.phrases.iter().map(|p| p.len()).sum::<usize>();
    }
    DatasetStats::from_counts(n, k, toks)
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sentences             {}", self.num_sentences)?;
        writeln!(f, "phrases               {}", self.num_phrases)?;
        writeln!(f, "phrases per sentence  {:.2}", self.phrases_per_sentence)?;
        write!(f, "avg phrase length     {:.2}", self.avg_phrase_len)
    }
}
