use super::{validate_spans, GroundingSample, PhraseSpan};
use crate::error::{validation_err, Error, Result};
use crate::nn::Tensor;

/// Binary object-to-token map of shape `M x (L + 1)`; the last column is
/// the `[NoObj]` token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GTAlignment {
    m: usize,
    l: usize,
    data: Vec<u8>,
}

impl GTAlignment {
    pub fn num_objects(&self) -> usize {
        self.m
    }

    pub fn num_tokens(&self) -> usize {
        self.l
    }

    pub fn cols(&self) -> usize {
        self.l + 1
    }

    pub fn no_obj_col(&self) -> usize {
        self.l
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * (self.l + 1) + c]
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * (self.l + 1)..(r + 1) * (self.l + 1)]
    }

    /// True when row `r` points at sentence tokens rather than `[NoObj]`.
    pub fn is_mentioned(&self, r: usize) -> bool {
        self.get(r, self.l) == 0
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::matrix(self.m, self.l + 1, data).expect("shape matches data")
    }
}

/// Marks each phrase's tokens in the row of its object; objects mentioned by
/// several phrases get the union of their tokens. Unmentioned objects point
/// at `[NoObj]`.
pub fn build_gt_alignment(sample: &GroundingSample, m: usize) -> Result<GTAlignment> {
    let l = sample.tokens.len();
    validate_spans(&sample.phrases, l)?;
    if let Some((i, p)) = sample.phrases.iter().enumerate().find(|(_, p)| p.object_id >= m) {
        return Err(validation_err!("phrases[{i}]: object {} outside {m} objects", p.object_id));
    }
    let cols = l + 1;
    let mut data = vec![0u8; m * cols];
    for p in &sample.phrases {
        for t in p.tokens() {
            data[p.object_id * cols + t] = 1;
        }
    }
    for r in 0..m {
        if data[r * cols..r * cols + l].iter().all(|&v| v == 0) {
            data[r * cols + l] = 1;
        }
    }
    Ok(GTAlignment { m, l, data })
}

/// Row-normalizes the alignment into cross-entropy targets.
pub fn soft_targets(gt: &GTAlignment) -> Result<Tensor<f64>> {
    let cols = gt.cols();
    let mut out = Vec::with_capacity(gt.m * cols);
    for r in 0..gt.m {
        let row = gt.row(r);
        let sum: u32 = row.iter().map(|&v| v as u32).sum();
        if sum == 0 {
            return Err(Error::State(format!("alignment row {r} is empty")));
        }
        out.extend(row.iter().map(|&v| v as f64 / sum as f64));
    }
    Tensor::matrix(gt.m, cols, out)
}

/// One binary token mask per phrase, shape `K x L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseMaskSet {
    k: usize,
    l: usize,
    data: Vec<u8>,
}

impl PhraseMaskSet {
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn num_tokens(&self) -> usize {
        self.l
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        &self.data[i * self.l..(i + 1) * self.l]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.k).map(|i| self.mask(i))
    }

    pub fn total(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

pub fn build_phrase_masks(sample: &GroundingSample) -> PhraseMaskSet {
    spans_to_masks(&sample.phrases, sample.tokens.len())
}

pub fn spans_to_masks(spans: &[PhraseSpan], l: usize) -> PhraseMaskSet {
    let mut data = vec![0u8; spans.len() * l];
    for (i, p) in spans.iter().enumerate() {
        for t in p.start..p.end.min(l) {
            data[i * l + t] = 1;
        }
    }
    PhraseMaskSet { k: spans.len(), l, data }
}

/// Inverse of [`spans_to_masks`] for contiguous masks: `(start, end)` per row.
pub fn masks_to_ranges(masks: &PhraseMaskSet) -> Result<Vec<(usize, usize)>> {
    masks
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let start = row.iter().position(|&v| v == 1).ok_or_else(|| validation_err!("mask {i} is empty"))?;
            let end = row.iter().rposition(|&v| v == 1).unwrap() + 1;
            if row[start..end].iter().any(|&v| v == 0) {
                return Err(validation_err!("mask {i} is not contiguous"));
            }
            Ok((start, end))
        })
        .collect()
}
