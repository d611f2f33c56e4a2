use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Result};
use crate::scenegen::Scene;

/// Maximum sentence length in tokens (excluding `[CLS]`).
pub const L_MAX: usize = 24;
/// Maximum number of object proposals per scene.
pub const M_MAX: usize = 24;

/// A contiguous half-open token range `[start, end)` bound to one object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub object_id: usize,
    pub is_target: bool,
}

impl PhraseSpan {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &PhraseSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Difficulty buckets used in the reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tags {
    pub hard: bool,
    pub view_dep: bool,
}

/// One referring sentence with its phrase-level ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub sample_id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub target_id: usize,
    pub phrases: Vec<PhraseSpan>,
    pub tags: Tags,
}

/// Checks span bounds and pairwise disjointness against a sentence length.
pub fn validate_spans(spans: &[PhraseSpan], len: usize) -> Result<()> {
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > len {
            return Err(validation_err!("phrases[{i}]: span [{}, {}) outside 0..{len}", s.start, s.end));
        }
        if let Some(j) = spans[..i].iter().position(|o| o.overlaps(s)) {
            return Err(validation_err!("phrases[{i}]: overlaps phrases[{j}]"));
        }
    }
    Ok(())
}

impl GroundingSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_span(&self) -> Option<&PhraseSpan> {
        self.phrases.iter().find(|p| p.is_target)
    }

    pub fn non_target_spans(&self) -> impl Iterator<Item = &PhraseSpan> {
        self.phrases.iter().filter(|p| !p.is_target)
    }

    /// Structural invariants that do not need the scene.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > L_MAX {
            return Err(validation_err!("{}: sentence length {} outside 1..={L_MAX}", self.sample_id, self.tokens.len()));
        }
        if self.phrases.is_empty() {
            return Err(validation_err!("{}: no phrases", self.sample_id));
        }
        validate_spans(&self.phrases, self.tokens.len()).map_err(|e| validation_err!("{}: {e}", self.sample_id))?;
        let targets: Vec<_> = self.phrases.iter().filter(|p| p.is_target).collect();
        if targets.len() != 1 {
            return Err(validation_err!("{}: expected one target phrase, found {}", self.sample_id, targets.len()));
        }
        if targets[0].object_id != self.target_id {
            return Err(validation_err!(
                "{}: target phrase bound to {} but target_id is {}",
                self.sample_id,
                targets[0].object_id,
                self.target_id
            ));
        }
        Ok(())
    }

    /// Full invariants including object ids against the scene.
    pub fn validate_against(&self, scene: &Scene) -> Result<()> {
        self.validate()?;
        if scene.scene_id != self.scene_id {
            return Err(validation_err!("{}: scene {} given for {}", self.sample_id, scene.scene_id, self.scene_id));
        }
        let m = scene.objects.len();
        if self.target_id >= m {
            return Err(validation_err!("{}: target_id {} outside {m} objects", self.sample_id, self.target_id));
        }
        if let Some(p) = self.phrases.iter().find(|p| p.object_id >= m) {
            return Err(validation_err!("{}: phrase object {} outside {m} objects", self.sample_id, p.object_id));
        }
        Ok(())
    }
}
