use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OutputVars;
use crate::nn::{Scalar, Tape, Var};
use crate::prepared::PreparedSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ground: f64,
    pub poa: f64,
    pub objcls: f64,
    pub clscls: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ground: 1.0, poa: 1.0, objcls: 0.5, clscls: 0.5, mask: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ground, self.poa, self.objcls, self.clscls, self.mask];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Which objective a forward pass is scored with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Ground the object of phrase `phrase`, highlighted through the mask channel.
    Pretrain { phrase: usize },
    /// Target grounding, optional POA supervision and the target-mask head.
    Finetune { poa: bool },
    /// Target grounding and the class heads only.
    Baseline,
}

/// Unweighted loss terms; absent terms were not part of the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ground: f64,
    pub poa: Option<f64>,
    pub objcls: f64,
    pub clscls: f64,
    pub mask: Option<f64>,
}

impl LossBreakdown {
    pub fn aux(&self) -> f64 {
        self.objcls + self.clscls
    }

    /// Running mean helper: adds `other / n` to every term.
    pub fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += other.total * scale;
        self.ground += other.ground * scale;
        self.objcls += other.objcls * scale;
        self.clscls += other.clscls * scale;
        if let Some(p) = other.poa {
            *self.poa.get_or_insert(0.0) += p * scale;
        }
        if let Some(m) = other.mask {
            *self.mask.get_or_insert(0.0) += m * scale;
        }
    }
}

/// Records the weighted objective on `tape`. Terms with zero weight are
/// left out of the graph entirely.
pub fn loss_total<T: Scalar>(
    tape: &mut Tape<T>,
    out: &OutputVars,
    sample: &PreparedSample,
    mode: LossMode,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let m = sample.num_objects();
    let (ground_obj, cls_target) = match mode {
        LossMode::Pretrain { phrase } => {
            let p = sample.phrases.get(phrase).ok_or_else(|| {
                Error::Validation(format!("{}: phrase {phrase} of {}", sample.sample_id, sample.phrases.len()))
            })?;
            (p.object_id, sample.obj_labels[p.object_id])
        }
        _ => (sample.target_id, sample.target_class()),
    };
    let mut terms: Vec<(Var, T)> = Vec::new();
    let mut bd = LossBreakdown::default();

    let scores = tape.reshape(out.scores, 1, m)?;
    let ground = tape.cross_entropy_logits(scores, &[ground_obj])?;
    bd.ground = tape.scalar(ground).as_f64();
    if w.ground > 0.0 {
        terms.push((ground, T::of(w.ground)));
    }

    let objcls = tape.cross_entropy_logits(out.obj_class_logits, &sample.obj_labels)?;
    bd.objcls = tape.scalar(objcls).as_f64();
    if w.objcls > 0.0 {
        terms.push((objcls, T::of(w.objcls)));
    }
    let clscls = tape.cross_entropy_logits(out.cls_target_logits, &[cls_target])?;
    bd.clscls = tape.scalar(clscls).as_f64();
    if w.clscls > 0.0 {
        terms.push((clscls, T::of(w.clscls)));
    }

    if let LossMode::Finetune { poa } = mode {
        if poa && w.poa > 0.0 {
            if tape.shape(out.poa) != (sample.soft_gt.rows(), sample.soft_gt.cols()) {
                return Err(Error::Config(format!(
                    "{}: alignment targets {:?} do not match the map {:?}",
                    sample.sample_id,
                    sample.soft_gt.shape(),
                    tape.shape(out.poa)
                )));
            }
            let l = tape.cross_entropy_soft(out.poa, &sample.soft_gt.cast())?;
            bd.poa = Some(tape.scalar(l).as_f64());
            terms.push((l, T::of(w.poa)));
        }
        if w.mask > 0.0 {
            let targets: Vec<T> = sample.target_mask.iter().map(|&b| T::of(b as f64)).collect();
            let l = tape.bce_logits(out.target_mask_logits, &targets)?;
            bd.mask = Some(tape.scalar(l).as_f64());
            terms.push((l, T::of(w.mask)));
        }
    }
    let total = tape.weighted_sum(&terms)?;
    bd.total = tape.scalar(total).as_f64();
    Ok((total, bd))
}
