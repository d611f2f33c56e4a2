//! Argument definitions and command dispatch for the `pag` binary.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use pag_core::dataset::{canonical_json, Dataset};
use pag_core::error::Result;
use pag_core::eval::EvalMode;
use pag_core::scenegen::{CorpusConfig, SceneConfig};
use pag_core::training::{LossWeights, RunOptions, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::ablation::{run_ablation, AblationConfig};
use crate::pipeline::{self, ArchOptions, Bundle};
use crate::service::{self, AppState};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "pag", version, about = "Phrase-aware 3D visual grounding on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase", tag = "command")]
pub enum Command {
    /// Generate a synthetic corpus with train/val splits.
    Gen(GenArgs),
    /// Phrase-masked pre-training.
    Pretrain(PretrainArgs),
    /// Train under the ablation switches.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Ground a free-form query in one scene.
    Ground(GroundArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Run the annotation backend.
    Serve(ServeArgs),
    /// Multi-seed ablation over the training regimes.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub hard_frac: Option<f64>,
    #[arg(long)]
    pub viewdep_frac: Option<f64>,
    #[arg(long, default_value_t = SceneConfig::default().min_objects)]
    pub min_objects: usize,
    #[arg(long, default_value_t = SceneConfig::default().max_objects)]
    pub max_objects: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ArchArgs {
    #[arg(long, default_value_t = ArchOptions::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = ArchOptions::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ArchOptions::default().joint_layers)]
    pub joint_layers: usize,
    #[arg(long, default_value_t = ArchOptions::default().text_layers)]
    pub text_layers: usize,
    #[arg(long, default_value_t = ArchOptions::default().num_points)]
    pub num_points: usize,
}

impl ArchArgs {
    fn options(&self) -> ArchOptions {
        ArchOptions {
            dim: self.dim,
            heads: self.heads,
            joint_layers: self.joint_layers,
            text_layers: self.text_layers,
            num_points: self.num_points,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr_pretrain)]
    pub lr_pretrain: f64,
    #[arg(long, default_value_t = TrainConfig::default().lr_finetune)]
    pub lr_finetune: f64,
    #[arg(long, default_value_t = TrainConfig::default().lr_decay)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().decay_every)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on rule-parsed target phrases only.
    #[arg(long)]
    pub weak: bool,
    /// Print every metrics row to stderr.
    #[arg(long)]
    pub verbose: bool,
}

impl ScheduleArgs {
    fn config(&self, epochs: usize, pretrain_epochs: usize, poa: bool, pretrain: bool) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_pretrain: self.lr_pretrain,
            lr_finetune: self.lr_finetune,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            epochs,
            pretrain_epochs,
            seed: self.seed,
            poa_enabled: poa,
            pretrain_enabled: pretrain,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().pretrain_epochs)]
    pub epochs: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Warm start from a pre-trained checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub no_poa: bool,
    #[arg(long)]
    pub no_pretrain: bool,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().pretrain_epochs)]
    pub pretrain_epochs: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "full")]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GroundArgs {
    /// A scene JSON file, or a scenes JSONL file with --scene-id.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub scene_id: Option<String>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub emit_poa: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = AblationConfig::default().train_samples)]
    pub train_samples: usize,
    #[arg(long, default_value_t = AblationConfig::default().val_samples)]
    pub val_samples: usize,
    #[arg(long, default_value_t = AblationConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = AblationConfig::default().arch.dim)]
    pub dim: usize,
    #[arg(long, default_value_t = AblationConfig::default().lr_scratch)]
    pub lr_scratch: f64,
    #[arg(long, default_value_t = AblationConfig::default().lr_finetune)]
    pub lr_finetune: f64,
    #[arg(long, default_value_t = AblationConfig::default().weights.poa)]
    pub poa_weight: f64,
    #[arg(long)]
    pub hard_frac: Option<f64>,
    /// Where to write the full JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one parsed command, writing results to `out` and the config log
/// line to stderr.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    eprintln!("{}", canonical_json(&json!({ "config": &cli.command }))?);
    match &cli.command {
        Command::Gen(a) => {
            let mut cfg = CorpusConfig::new(a.scenes, a.samples, a.seed);
            cfg.hard_frac = a.hard_frac;
            cfg.viewdep_frac = a.viewdep_frac;
            cfg.scene = SceneConfig::with_objects(a.min_objects, a.max_objects);
            let data = pipeline::generate(&cfg, &a.out)?;
            writeln!(
                out,
                "wrote {} scenes and {} samples to {}",
                data.scenes.len(),
                data.samples.len(),
                a.out.display()
            )?;
        }
        Command::Pretrain(a) => {
            let data = Dataset::load(&a.data)?;
            let bundle = Bundle::fresh(&data, &a.arch.options(), a.schedule.seed)?;
            let cfg = a.schedule.config(0, a.epochs, false, true);
            let opts = RunOptions { dump_dir: a.out.parent().map(PathBuf::from), verbose: a.schedule.verbose };
            let res = pipeline::pretrain(&data, bundle, a.schedule.weak, &cfg, &a.out, &opts)?;
            writeln!(out, "{}", canonical_json(&json!({"best_epoch": res.best_epoch, "masked_phrase_acc": res.best_score, "ckpt": a.out}))?)?;
        }
        Command::Train(a) => {
            let data = Dataset::load(&a.data)?;
            let (bundle, warm) = match &a.init {
                Some(p) => (Bundle::load(p)?, true),
                None => (Bundle::fresh(&data, &a.arch.options(), a.schedule.seed)?, false),
            };
            let cfg = a.schedule.config(a.epochs, a.pretrain_epochs, !a.no_poa, !a.no_pretrain);
            let opts = RunOptions { dump_dir: a.out.parent().map(PathBuf::from), verbose: a.schedule.verbose };
            let res = pipeline::train(&data, bundle, warm, a.schedule.weak, &cfg, &a.out, &opts)?;
            let report = res.final_report.as_ref().map(|r| json!({"acc_vg": r.acc_vg, "acc_pag": r.acc_pag, "acc_pg": r.acc_pg}));
            writeln!(out, "{}", canonical_json(&json!({"best_epoch": res.best_epoch, "val": report, "ckpt": a.out}))?)?;
        }
        Command::Eval(a) => {
            let data = Dataset::load(&a.data)?;
            let bundle = Bundle::load(&a.ckpt)?;
            let report = pipeline::evaluate_split(&data, &bundle, a.mode, a.seed)?;
            if a.json {
                writeln!(out, "{}", report.to_json()?)?;
            } else {
                writeln!(out, "{}", report.to_table())?;
            }
        }
        Command::Ground(a) => {
            let scene = pipeline::read_scene(&a.scene, a.scene_id.as_deref())?;
            let bundle = Bundle::load(&a.ckpt)?;
            let g = pipeline::ground(&scene, &bundle, &a.query)?;
            if let Some(p) = &a.emit_poa {
                std::fs::write(p, pipeline::poa_csv(&g.poa))?;
            }
            if a.json {
                writeln!(out, "{}", canonical_json(&g)?)?;
            } else {
                writeln!(out, "target {} ({})", g.target_id, g.target_label)?;
                for p in &g.phrases {
                    writeln!(out, "phrase [{}, {}) \"{}\" -> object {}", p.start, p.end, p.text, p.object_id)?;
                }
            }
        }
        Command::Stats(a) => {
            let data = Dataset::load(&a.data)?;
            if a.json {
                let (all, train, val) = pipeline::stats(&data)?;
                writeln!(out, "{}", canonical_json(&json!({"all": all, "train": train, "val": val}))?)?;
            } else {
                write!(out, "{}", pipeline::stats_block(&data)?)?;
            }
        }
        Command::Serve(a) => {
            let data = Dataset::load(&a.data)?;
            let store = Store::open(&a.store)?;
            let state = Arc::new(AppState::new(data, store));
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            writeln!(out, "serving on 127.0.0.1:{}", a.port)?;
            out.flush()?;
            rt.block_on(service::serve(state, a.port))?;
        }
        Command::Ablate(a) => {
            let d = AblationConfig::default();
            let cfg = AblationConfig {
                seeds: a.seeds.clone(),
                train_samples: a.train_samples,
                val_samples: a.val_samples,
                epochs: a.epochs,
                pretrain_epochs: a.epochs,
                arch: ArchOptions { dim: a.dim, ..d.arch.clone() },
                lr_scratch: a.lr_scratch,
                lr_finetune: a.lr_finetune,
                weights: LossWeights { poa: a.poa_weight, ..d.weights },
                hard_frac: a.hard_frac.or(d.hard_frac),
                ..d
            };
            let report = run_ablation(&cfg, |line| eprintln!("{line}"))?;
            if let Some(p) = &a.out {
                std::fs::write(p, canonical_json(&report)?)?;
            }
            write!(out, "{}", report.table())?;
        }
    }
    Ok(())
}

/// The single-line machine-readable error printed on failure.
pub fn error_line(kind: &str, message: &str) -> String {
    canonical_json(&json!({"error": {"kind": kind, "message": message}}))
        .unwrap_or_else(|_| format!("{{\"error\":{{\"kind\":\"{kind}\"}}}}"))
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string().replace('\n', " ")));
            1
        }
    }
}

