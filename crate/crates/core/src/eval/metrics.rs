use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrasePrediction {
    pub phrase_index: usize,
    pub predicted: usize,
    pub gt: usize,
    pub correct: bool,
}

impl PhrasePrediction {
    pub fn new(phrase_index: usize, predicted: usize, gt: usize) -> Self {
        PhrasePrediction { phrase_index, predicted, gt, correct: predicted == gt }
    }
}

/// Averages the POA columns of tokens `start..end` and returns the object
/// with the highest mean; ties go to the lowest id.
pub fn ground_phrase(poa: &Tensor<f32>, start: usize, end: usize) -> Result<usize> {
    let cols = poa.cols();
    if start >= end {
        return Err(Error::Validation(format!("empty phrase span [{start}, {end})")));
    }
    if end >= cols {
        return Err(Error::Validation(format!("phrase span [{start}, {end}) reaches the [NoObj] column")));
    }
    let width = (end - start) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for m in 0..poa.rows() {
        let score = poa.row(m)[start..end].iter().map(|&v| v as f64).sum::<f64>() / width;
        if score > best.1 {
            best = (m, score);
        }
    }
    Ok(best.0)
}

/// `Acc_VG * Acc_non-target` for one sentence; the second factor is 1 when
/// the sentence mentions no other object.
pub fn acc_pag_sentence(target_correct: bool, nontarget: &[PhrasePrediction]) -> f64 {
    if !target_correct {
        return 0.0;
    }
    if nontarget.is_empty() {
        return 1.0;
    }
    nontarget.iter().filter(|p| p.correct).count() as f64 / nontarget.len() as f64
}

/// Fraction of correctly grounded phrases, target phrases included.
pub fn acc_pg(preds: &[PhrasePrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Validation("phrase accuracy over zero phrases".into()));
    }
    Ok(preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64)
}
