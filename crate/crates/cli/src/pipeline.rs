//! The operations behind each command, usable without the argument parser.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pag_core::dataset::{dataset_stats, parse_phrases, tokenize, Dataset, DatasetStats, Vocabulary, L_MAX};
use pag_core::error::{Error, Result};
use pag_core::eval::{evaluate, ground_phrase, EvalMode, EvalReport};
use pag_core::model::{build_input, load_checkpoint, save_checkpoint, Model, ModelConfig};
use pag_core::prepared::{prepare_samples, PreparedSample};
use pag_core::scenegen::{generate_corpus, CorpusConfig, Scene};
use pag_core::training::{
    metrics_csv, run_stage, run_training, LossMode, RunOptions, Stage, StagePlan, StageResult, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Architecture knobs exposed on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchOptions {
    pub dim: usize,
    pub heads: usize,
    pub joint_layers: usize,
    pub text_layers: usize,
    pub num_points: usize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        let d = ModelConfig::default();
        ArchOptions {
            dim: d.dim,
            heads: d.heads,
            joint_layers: d.joint_layers,
            text_layers: d.text_layers,
            num_points: d.num_points,
        }
    }
}

/// A model with the vocabulary and class list it was trained with.
pub struct Bundle {
    pub model: Model,
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
}

impl Bundle {
    pub fn fresh(data: &Dataset, arch: &ArchOptions, seed: u64) -> Result<Self> {
        let classes = data.class_names();
        let vocab = Vocabulary::build(data.train_samples());
        let defaults = ModelConfig::default();
        let widths = match arch.dim {
            d if d >= defaults.point_mlp_widths.last().copied().unwrap_or(d) => defaults.point_mlp_widths.clone(),
            d => vec![d.clamp(8, 32), d],
        };
        let config = ModelConfig {
            dim: arch.dim,
            heads: arch.heads,
            joint_layers: arch.joint_layers,
            text_layers: arch.text_layers,
            point_mlp_widths: widths,
            num_classes: classes.len(),
            vocab_size: vocab.len(),
            num_points: arch.num_points,
            seed,
            ..defaults
        };
        Ok(Bundle { model: Model::new(config)?, vocab, classes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let field = |k: &str| {
            ck.meta.get(k).cloned().ok_or_else(|| Error::Load(format!("{}: checkpoint meta lacks {k:?}", path.display())))
        };
        let vocab: Vocabulary =
            serde_json::from_value(field("vocab")?).map_err(|e| Error::Load(format!("{}: vocab: {e}", path.display())))?;
        let classes: Vec<String> =
            serde_json::from_value(field("classes")?).map_err(|e| Error::Load(format!("{}: classes: {e}", path.display())))?;
        if vocab.len() != ck.model.config.vocab_size || classes.len() != ck.model.config.num_classes {
            return Err(Error::Load(format!("{}: meta does not match the model config", path.display())));
        }
        Ok(Bundle { model: ck.model, vocab, classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        save_checkpoint(path, &self.model, &json!({"vocab": self.vocab, "classes": self.classes}))
    }

    /// Train and validation samples encoded with this bundle's vocabulary.
    pub fn prepare(&self, data: &Dataset) -> Result<(Vec<PreparedSample>, Vec<PreparedSample>)> {
        if data.class_names() != self.classes {
            return Err(Error::Config("dataset classes differ from the checkpoint's".into()));
        }
        let n = self.model.config.num_points;
        let train = prepare_samples(data, &data.train_samples(), &self.vocab, &self.classes, L_MAX, n)?;
        let val = prepare_samples(data, &data.val_samples(), &self.vocab, &self.classes, L_MAX, n)?;
        Ok((train, val))
    }
}

pub fn generate(config: &CorpusConfig, out: &Path) -> Result<Dataset> {
    let corpus = generate_corpus(config)?;
    let data = Dataset::new(corpus.scenes, corpus.samples, corpus.split)?;
    data.save(out)?;
    Ok(data)
}

pub fn metrics_path(ckpt: &Path, stage: Stage) -> PathBuf {
    let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let suffix = match stage {
        Stage::Pretrain => "pretrain.csv",
        Stage::Finetune => "metrics.csv",
    };
    ckpt.with_file_name(format!("{name}.{suffix}"))
}

fn write_metrics(ckpt: &Path, stage: Stage, res: &StageResult) -> Result<()> {
    std::fs::write(metrics_path(ckpt, stage), metrics_csv(&res.rows))?;
    Ok(())
}

/// Phrase-masked pre-training only.
pub fn pretrain(
    data: &Dataset,
    mut bundle: Bundle,
    weak: bool,
    config: &TrainConfig,
    out: &Path,
    opts: &RunOptions,
) -> Result<StageResult> {
    let (mut train, val) = bundle.prepare(data)?;
    if weak {
        train = weak_views(&train, &bundle.classes);
    }
    let plan = StagePlan {
        stage: Stage::Pretrain,
        mode: LossMode::Pretrain { phrase: 0 },
        epochs: config.pretrain_epochs,
        lr0: config.lr_pretrain,
    };
    let res = run_stage(bundle.model.clone(), &train, &val, &plan, config, opts)?;
    bundle.model = res.best.clone();
    bundle.save(out)?;
    write_metrics(out, Stage::Pretrain, &res)?;
    Ok(res)
}

/// Keeps only the rule-parsed target phrase of every sample; samples the
/// parser misses are dropped.
pub fn weak_views(samples: &[PreparedSample], classes: &[String]) -> Vec<PreparedSample> {
    let set: HashSet<String> = classes.iter().cloned().collect();
    samples.iter().filter_map(|s| s.weak_view(&set)).collect()
}

/// Full training under the ablation switches; `warm` marks a bundle loaded
/// from a pre-trained checkpoint. With `weak`, training sees only parsed
/// target phrases.
pub fn train(
    data: &Dataset,
    mut bundle: Bundle,
    warm: bool,
    weak: bool,
    config: &TrainConfig,
    out: &Path,
    opts: &RunOptions,
) -> Result<StageResult> {
    let (mut train, val) = bundle.prepare(data)?;
    if weak {
        train = weak_views(&train, &bundle.classes);
    }
    let outcome = run_training(bundle.model.clone(), warm, &train, &val, config, opts)?;
    bundle.model = outcome.model;
    bundle.save(out)?;
    if let Some(p) = &outcome.pretrain {
        write_metrics(out, Stage::Pretrain, p)?;
    }
    write_metrics(out, Stage::Finetune, &outcome.finetune)?;
    Ok(outcome.finetune)
}

/// Evaluates on the validation split against the full annotations.
pub fn evaluate_split(data: &Dataset, bundle: &Bundle, mode: EvalMode, seed: u64) -> Result<EvalReport> {
    let (_, val) = bundle.prepare(data)?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    evaluate(&bundle.model, &val, mode, seed)
}

pub fn stats(data: &Dataset) -> Result<(DatasetStats, DatasetStats, DatasetStats)> {
    Ok((dataset_stats(&data.samples)?, dataset_stats(data.train_samples())?, dataset_stats(data.val_samples())?))
}

pub fn stats_block(data: &Dataset) -> Result<String> {
    let (all, train, val) = stats(data)?;
    let mut out = format!("{:<8}{:>10}{:>10}{:>12}{:>12}\n", "split", "sentences", "phrases", "phr/sent", "phr len");
    for (name, s) in [("all", all), ("train", train), ("val", val)] {
        out.push_str(&format!(
            "{:<8}{:>10}{:>10}{:>12.2}{:>12.2}\n",
            name, s.num_sentences, s.num_phrases, s.phrases_per_sentence, s.avg_phrase_len
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub object_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub target_id: usize,
    pub target_label: String,
    pub scores: Vec<f32>,
    pub phrases: Vec<GroundedPhrase>,
    /// `M x (L + 1)` alignment map.
    #[serde(skip)]
    pub poa: Vec<Vec<f32>>,
}

/// Grounds a free-form query. Noun phrases are found by the rule-based
/// chunker and read off the alignment map.
pub fn ground(scene: &Scene, bundle: &Bundle, query: &str) -> Result<Grounding> {
    let tokens = tokenize(query);
    if tokens.is_empty() {
        return Err(Error::Validation("query has no tokens".into()));
    }
    let input = build_input(scene, &tokens, &bundle.vocab, L_MAX, bundle.model.config.num_points)?;
    let out = bundle.model.forward(&input)?;
    let classes: HashSet<String> = bundle.classes.iter().cloned().collect();
    let phrases = parse_phrases(&tokens, &classes)
        .into_iter()
        .map(|(start, end)| {
            Ok(GroundedPhrase { start, end, text: tokens[start..end].join(" "), object_id: ground_phrase(&out.poa, start, end)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let target_id = out.predicted_target();
    Ok(Grounding {
        target_id,
        target_label: scene.objects[target_id].label.clone(),
        scores: out.scores.clone(),
        phrases,
        poa: out.poa.to_rows(),
    })
}

pub fn poa_csv(poa: &[Vec<f32>]) -> String {
    let mut out = String::new();
    for row in poa {
        out.push_str(&row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Reads one scene from a JSON file; a JSONL file is accepted when it holds
/// exactly one scene or `scene_id` selects one.
pub fn read_scene(path: &Path, scene_id: Option<&str>) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if let Ok(scene) = serde_json::from_str::<Scene>(&text) {
        return check_scene(scene, scene_id);
    }
    let scenes: Vec<Scene> = pag_core::dataset::read_scenes(path)?;
    match scene_id {
        Some(id) => scenes
            .into_iter()
            .find(|s| s.scene_id == id)
            .ok_or_else(|| Error::Validation(format!("{}: no scene {id:?}", path.display()))),
        None if scenes.len() == 1 => Ok(scenes.into_iter().next().unwrap_or_else(|| unreachable!())),
        None => Err(Error::Config(format!("{} holds {} scenes; pass --scene-id", path.display(), scenes.len()))),
    }
}

fn check_scene(scene: Scene, scene_id: Option<&str>) -> Result<Scene> {
    match scene_id {
        Some(id) if id != scene.scene_id => Err(Error::Validation(format!("scene file holds {:?}, not {id:?}", scene.scene_id))),
        _ => Ok(scene),
    }
}
