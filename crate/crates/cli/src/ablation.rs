//! Multi-seed ablation over the training regimes: no alignment supervision
//! (B), alignment supervision (C), pre-training (D), both (F), and the
//! weakly supervised variant (W) trained on parsed target phrases only.

use pag_core::dataset::{Dataset, Vocabulary, L_MAX};
use pag_core::error::{Error, Result};
use pag_core::eval::{evaluate, EvalMode, EvalReport};
use pag_core::model::Model;
use pag_core::prepared::{prepare_samples, PreparedSample};
use pag_core::scenegen::{generate_corpus, CorpusConfig, SceneConfig};
use pag_core::training::{run_stage, LossMode, LossWeights, RunOptions, Stage, StagePlan, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::pipeline::{weak_views, ArchOptions, Bundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Share of samples whose target has more than two same-class objects.
    pub hard_frac: Option<f64>,
    pub arch: ArchOptions,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Rate for pre-training and for fine-tuning from scratch.
    pub lr_scratch: f64,
    /// Rate for fine-tuning a pre-trained model.
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            train_samples: 2000,
            val_samples: 500,
            min_objects: 8,
            max_objects: 10,
            hard_frac: None,
            arch: ArchOptions { dim: 32, heads: 4, joint_layers: 2, text_layers: 1, num_points: 16 },
            epochs: 40,
            pretrain_epochs: 40,
            lr_scratch: 1e-3,
            lr_finetune: 1e-4,
            batch_size: 16,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// No pre-training, no alignment loss.
    B,
    /// Alignment loss from scratch.
    C,
    /// Pre-training, then fine-tuning without the alignment loss.
    D,
    /// Pre-training and the alignment loss.
    F,
    /// Weak supervision: parsed target phrases only.
    W,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::B, Variant::C, Variant::D, Variant::F, Variant::W];
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub full: EvalReport,
    pub weak: EvalReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<VariantRun>,
    pub randselect: Vec<EvalReport>,
}

impl AblationReport {
    fn mean(&self, variant: Variant, f: impl Fn(&VariantRun) -> f64) -> f64 {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant).map(f).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    pub fn mean_vg(&self, v: Variant) -> f64 {
        self.mean(v, |r| r.full.acc_vg)
    }

    /// Phrase metrics under the protocol each variant is meant for: the
    /// alignment map for fully supervised models, mask probing for W.
    pub fn mean_phrase(&self, v: Variant) -> (f64, f64) {
        let pick = |r: &VariantRun| if v == Variant::W { r.weak.clone() } else { r.full.clone() };
        (self.mean(v, |r| pick(r).acc_pag), self.mean(v, |r| pick(r).acc_pg))
    }

    pub fn mean_weak_probe(&self, v: Variant) -> (f64, f64) {
        (self.mean(v, |r| r.weak.acc_pag), self.mean(v, |r| r.weak.acc_pg))
    }

    pub fn randselect(&self) -> (f64, f64) {
        let n = self.randselect.len().max(1) as f64;
        (
            self.randselect.iter().map(|r| r.acc_pag).sum::<f64>() / n,
            self.randselect.iter().map(|r| r.acc_pg).sum::<f64>() / n,
        )
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8}{:>8}{:>8}{:>8}{:>10}{:>10}\n", "model", "OA", "PAG", "PG", "probe PAG", "probe PG");
        for v in Variant::ALL {
            let (pag, pg) = self.mean_phrase(v);
            let (wpag, wpg) = self.mean_weak_probe(v);
            out.push_str(&format!(
                "{:<8}{:>8.1}{:>8.1}{:>8.1}{:>10.1}{:>10.1}\n",
                format!("{v:?}"),
                100.0 * self.mean_vg(v),
                100.0 * pag,
                100.0 * pg,
                100.0 * wpag,
                100.0 * wpg
            ));
        }
        let (rp, rg) = self.randselect();
        out.push_str(&format!("{:<8}{:>8}{:>8.1}{:>8.1}\n", "rand", "", 100.0 * rp, 100.0 * rg));
        out
    }
}

/// Exactly `train` and `val` prepared samples from a corpus split by scene.
pub fn ablation_data(config: &AblationConfig, seed: u64) -> Result<(Vec<PreparedSample>, Vec<PreparedSample>, Bundle)> {
    let total = config.train_samples + config.val_samples;
    // Headroom so the scene-level split leaves enough samples on each side.
    let mut cc = CorpusConfig::new((total / 5).max(4), total + total / 4, 100 + seed);
    cc.scene = SceneConfig::with_objects(config.min_objects, config.max_objects);
    cc.hard_frac = config.hard_frac;
    let corpus = generate_corpus(&cc)?;
    let data = Dataset::new(corpus.scenes, corpus.samples, corpus.split)?;
    let mut bundle = Bundle::fresh(&data, &config.arch, seed)?;
    bundle.vocab = Vocabulary::build(data.train_samples());
    let n = config.arch.num_points;
    let mut train = prepare_samples(&data, &data.train_samples(), &bundle.vocab, &bundle.classes, L_MAX, n)?;
    let mut val = prepare_samples(&data, &data.val_samples(), &bundle.vocab, &bundle.classes, L_MAX, n)?;
    if train.len() < config.train_samples || val.len() < config.val_samples {
        return Err(Error::Generation(format!(
            "split gave {} train / {} val samples, wanted {} / {}",
            train.len(),
            val.len(),
            config.train_samples,
            config.val_samples
        )));
    }
    train.truncate(config.train_samples);
    val.truncate(config.val_samples);
    Ok((train, val, bundle))
}

/// Runs every variant for every seed. `progress` receives one line per
/// finished run.
pub fn run_ablation(config: &AblationConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let mut runs = Vec::new();
    let mut randselect = Vec::new();
    for &seed in &config.seeds {
        let (train, val, bundle) = ablation_data(config, seed)?;
        let weak_train = weak_views(&train, &bundle.classes);
        let tc = TrainConfig {
            batch_size: config.batch_size,
            epochs: config.epochs,
            pretrain_epochs: config.pretrain_epochs,
            lr_pretrain: config.lr_scratch,
            lr_finetune: config.lr_finetune,
            seed,
            weights: config.weights,
            ..TrainConfig::default()
        };
        let opts = RunOptions::default();
        randselect.push(evaluate(&bundle.model, &val, EvalMode::RandSelect, seed)?);

        let finetune = |model: Model, train: &[PreparedSample], mode: LossMode, lr0: f64| {
            let plan = StagePlan { stage: Stage::Finetune, mode, epochs: config.epochs, lr0 };
            run_stage(model, train, &val, &plan, &tc, &opts)
        };
        let pretrain = |train: &[PreparedSample]| {
            let plan =
                StagePlan { stage: Stage::Pretrain, mode: LossMode::Pretrain { phrase: 0 }, epochs: config.pretrain_epochs, lr0: config.lr_scratch };
            run_stage(bundle.model.clone(), train, &val, &plan, &tc, &opts).map(|r| {
                let mut m = r.best;
                m.store.reset_optimizer();
                m
            })
        };
        let mut record = |variant: Variant, t0: std::time::Instant, res: pag_core::training::StageResult| -> Result<()> {
            let full = evaluate(&res.best, &val, EvalMode::Full, seed)?;
            let weak = evaluate(&res.best, &val, EvalMode::Weak, seed)?;
            let run = VariantRun { variant, seed, best_epoch: res.best_epoch, full, weak, seconds: t0.elapsed().as_secs_f64() };
            progress(&format!(
                "seed {seed} {variant:?}: OA {:.3} PAG {:.3} PG {:.3} | probe PAG {:.3} PG {:.3} | best epoch {} | {:.0}s",
                run.full.acc_vg, run.full.acc_pag, run.full.acc_pg, run.weak.acc_pag, run.weak.acc_pg, run.best_epoch, run.seconds
            ));
            runs.push(run);
            Ok(())
        };

        let t0 = std::time::Instant::now();
        record(Variant::B, t0, finetune(bundle.model.clone(), &train, LossMode::Baseline, config.lr_scratch)?)?;
        let t0 = std::time::Instant::now();
        record(Variant::C, t0, finetune(bundle.model.clone(), &train, LossMode::Finetune { poa: true }, config.lr_scratch)?)?;
        let t0 = std::time::Instant::now();
        let pre = pretrain(&train)?;
        record(Variant::D, t0, finetune(pre.clone(), &train, LossMode::Finetune { poa: false }, config.lr_finetune)?)?;
        // The shared pre-training is charged to D only.
        let t0 = std::time::Instant::now();
        record(Variant::F, t0, finetune(pre, &train, LossMode::Finetune { poa: true }, config.lr_finetune)?)?;
        let t0 = std::time::Instant::now();
        let weak_pre = pretrain(&weak_train)?;
        record(Variant::W, t0, finetune(weak_pre, &weak_train, LossMode::Finetune { poa: false }, config.lr_finetune)?)?;
    }
    Ok(AblationReport { config: config.clone(), runs, randselect })
}
