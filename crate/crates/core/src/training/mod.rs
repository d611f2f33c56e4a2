//! Objectives, optimizer steps and the two-stage training loop.

mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, masked_phrase_accuracy, EvalMode, EvalReport};
use crate::model::Model;
use crate::nn::{Adam, Rng, Tape};
use crate::prepared::PreparedSample;

pub use loss::{loss_total, LossBreakdown, LossMode, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub poa_enabled: bool,
    pub pretrain_enabled: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_pretrain: 1e-4,
            lr_finetune: 1e-5,
            lr_decay: 0.65,
            decay_every: 10,
            epochs: 40,
            pretrain_epochs: 40,
            seed: 0,
            poa_enabled: true,
            pretrain_enabled: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        if !(self.lr_pretrain > 0.0 && self.lr_finetune > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1)", self.lr_decay)));
        }
        self.weights.validate()
    }

    /// The objective of the fine-tuning stage under the ablation switches.
    pub fn finetune_mode(&self) -> LossMode {
        if !self.poa_enabled && !self.pretrain_enabled {
            LossMode::Baseline
        } else {
            LossMode::Finetune { poa: self.poa_enabled }
        }
    }
}

/// Step decay: `lr0 * decay^floor(epoch / every)`.
pub fn lr_at(epoch: usize, lr0: f64, decay: f64, every: usize) -> f64 {
    lr0 * decay.powi((epoch / every.max(1)) as i32)
}

/// Forward, loss and backward for one sample; gradients are scaled by
/// `scale` and added to the parameter store.
pub fn accumulate_sample(
    model: &mut Model,
    sample: &PreparedSample,
    mode: LossMode,
    weights: &LossWeights,
    scale: f32,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let input;
    let input_ref = match mode {
        LossMode::Pretrain { phrase } => {
            input = sample.input.with_mask(&sample.masks[phrase])?;
            &input
        }
        _ => &sample.input,
    };
    let out = model.forward_tape(&mut tape, input_ref)?;
    let (loss, bd) = loss_total(&mut tape, &out, sample, mode, weights)?;
    if !bd.total.is_finite() {
        return Err(Error::NonFinite(format!("{}: loss {:?}", sample.sample_id, bd)));
    }
    let grads = tape.backward_seeded(loss, &[scale])?;
    model.store.accumulate(&tape, &grads);
    Ok(bd)
}

/// One optimizer step over a batch; returns the batch-mean loss terms.
fn batch_step(
    model: &mut Model,
    batch: &[(&PreparedSample, LossMode)],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossBreakdown> {
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    for &(s, mode) in batch {
        let bd = accumulate_sample(model, s, mode, weights, scale as f32).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg}; batch [{}]",
                batch.iter().map(|(s, _)| s.sample_id.as_str()).collect::<Vec<_>>().join(", ")
            )),
            other => other,
        })?;
        mean.add_scaled(&bd, scale);
    }
    Adam::new(lr).step(&mut model.store)?;
    if !model.store.all_finite() {
        return Err(Error::NonFinite("parameters became non-finite after an update".into()));
    }
    Ok(mean)
}

/// The phrase highlighted for one pre-training sample, uniform over its phrases.
pub fn draw_phrase(rng: &mut Rng, sample: &PreparedSample) -> usize {
    rng.below(sample.phrases.len())
}

/// Phrase-masked pre-training step: each sample highlights one phrase drawn
/// uniformly and is supervised with that phrase's object.
pub fn pretrain_step(
    model: &mut Model,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    lr: f64,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let items: Vec<(&PreparedSample, LossMode)> =
        batch.iter().map(|&s| (s, LossMode::Pretrain { phrase: draw_phrase(rng, s) })).collect();
    batch_step(model, &items, weights, lr)
}

/// Fine-tuning step with an all-zero mask channel.
pub fn finetune_step(
    model: &mut Model,
    batch: &[&PreparedSample],
    mode: LossMode,
    weights: &LossWeights,
    lr: f64,
) -> Result<LossBreakdown> {
    let items: Vec<(&PreparedSample, LossMode)> = batch.iter().map(|&s| (s, mode)).collect();
    batch_step(model, &items, weights, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ground: f64,
    pub loss_poa: f64,
    pub loss_aux: f64,
    pub loss_mask: f64,
    pub acc_vg: f64,
    pub acc_pag: f64,
    pub acc_pg: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_ground,loss_poa,loss_aux,loss_mask,acc_vg,acc_pag,acc_pg,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:e}",
            r.epoch, r.loss_total, r.loss_ground, r.loss_poa, r.loss_aux, r.loss_mask, r.acc_vg, r.acc_pag, r.acc_pg, r.lr
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// What a stage optimizes and how it is scheduled.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stage: Stage,
    pub mode: LossMode,
    pub epochs: usize,
    pub lr0: f64,
}

pub struct StageResult {
    pub best: Model,
    pub best_epoch: usize,
    /// Validation score used for selection.
    pub best_score: f64,
    pub rows: Vec<MetricsRow>,
    pub final_report: Option<EvalReport>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where the offending batch is described when training aborts.
    pub dump_dir: Option<PathBuf>,
    /// Print every metrics row to stderr as JSON.
    pub verbose: bool,
}

fn dump_failure(dir: &Path, stage: Stage, epoch: usize, batch: &[&PreparedSample], err: &Error) -> Result<PathBuf> {
    let path = dir.join("nan_dump.json");
    let body = serde_json::json!({
        "stage": stage,
        "epoch": epoch,
        "error": err.to_string(),
        "samples": batch.iter().map(|s| serde_json::json!({
            "sample_id": s.sample_id,
            "tokens": s.tokens,
            "target_id": s.target_id,
            "phrases": s.phrases,
        })).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap_or_default())?;
    Ok(path)
}

/// Trains one stage, validating after every epoch and keeping the best
/// model (Acc_VG for fine-tuning, masked phrase accuracy for pre-training).
pub fn run_stage(
    model: Model,
    train: &[PreparedSample],
    val: &[PreparedSample],
    plan: &StagePlan,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<StageResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let stream = match plan.stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
    };
    let mut rng = Rng::derive(config.seed, stream);
    let mut model = model;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(plan.epochs);
    let mut best: Option<(Model, usize, f64, Option<EvalReport>)> = None;
    for epoch in 0..plan.epochs {
        let lr = lr_at(epoch, plan.lr0, config.lr_decay, config.decay_every);
        rng.shuffle(&mut order);
        let mut mean = LossBreakdown::default();
        let batches = order.len().div_ceil(config.batch_size);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let step = match plan.mode {
                LossMode::Pretrain { .. } => pretrain_step(&mut model, &batch, &config.weights, lr, &mut rng),
                mode => finetune_step(&mut model, &batch, mode, &config.weights, lr),
            };
            let bd = match step {
                Ok(bd) => bd,
                Err(e @ Error::NonFinite(_)) => {
                    let msg = match &opts.dump_dir {
                        Some(dir) => {
                            let p = dump_failure(dir, plan.stage, epoch, &batch, &e)?;
                            format!("{e}; batch dumped to {}", p.display())
                        }
                        None => e.to_string(),
                    };
                    return Err(Error::NonFinite(msg));
                }
                Err(e) => return Err(e),
            };
            mean.add_scaled(&bd, 1.0 / batches as f64);
        }
        let report = evaluate(&model, val, EvalMode::Full, config.seed)?;
        let score = match plan.stage {
            Stage::Pretrain => masked_phrase_accuracy(&model, val)?,
            Stage::Finetune => report.acc_vg,
        };
        let row = MetricsRow {
            epoch,
            loss_total: mean.total,
            loss_ground: mean.ground,
            loss_poa: mean.poa.unwrap_or(0.0),
            loss_aux: mean.aux(),
            loss_mask: mean.mask.unwrap_or(0.0),
            acc_vg: report.acc_vg,
            acc_pag: report.acc_pag,
            acc_pg: report.acc_pg,
            lr,
        };
        if opts.verbose {
            eprintln!("{}", serde_json::to_string(&row).unwrap_or_default());
        }
        rows.push(row);
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((model.clone(), epoch, score, Some(report)));
        }
    }
    let (best, best_epoch, best_score, final_report) = match best {
        Some(b) => b,
        None => {
            let report = evaluate(&model, val, EvalMode::Full, config.seed)?;
            (model, 0, report.acc_vg, Some(report))
        }
    };
    Ok(StageResult { best, best_epoch, best_score, rows, final_report })
}

pub struct TrainOutcome {
    pub model: Model,
    pub pretrain: Option<StageResult>,
    pub finetune: StageResult,
}

/// Pre-training (when enabled and no initial model is given) followed by
/// fine-tuning. Warm-started fine-tuning uses `lr_finetune`; training from
/// scratch uses `lr_pretrain`.
pub fn run_training(
    model: Model,
    warm_started: bool,
    train: &[PreparedSample],
    val: &[PreparedSample],
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, pretrain, warm) = if config.pretrain_enabled && !warm_started {
        let plan =
            StagePlan { stage: Stage::Pretrain, mode: LossMode::Pretrain { phrase: 0 }, epochs: config.pretrain_epochs, lr0: config.lr_pretrain };
        let res = run_stage(model, train, val, &plan, config, opts)?;
        (res.best.clone(), Some(res), true)
    } else {
        (model, None, warm_started)
    };
    let mut model = model;
    if warm {
        model.store.reset_optimizer();
    }
    let plan = StagePlan {
        stage: Stage::Finetune,
        mode: config.finetune_mode(),
        epochs: config.epochs,
        lr0: if warm { config.lr_finetune } else { config.lr_pretrain },
    };
    let finetune = run_stage(model, train, val, &plan, config, opts)?;
    Ok(TrainOutcome { model: finetune.best.clone(), pretrain, finetune })
}
