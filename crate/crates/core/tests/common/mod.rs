#![allow(dead_code)]

use pag_core::dataset::{Dataset, Vocabulary, L_MAX};
use pag_core::model::ModelConfig;
use pag_core::prepared::{prepare_samples, PreparedSample};
use pag_core::scenegen::{generate_corpus, CorpusConfig, SceneConfig};

pub struct SmallData {
    pub samples: Vec<PreparedSample>,
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
}

/// `samples` prepared samples over small scenes, all in one split.
pub fn small_data(samples: usize, seed: u64) -> SmallData {
    let mut cfg = CorpusConfig::new(samples.div_ceil(4).max(2), samples, seed);
    cfg.scene = SceneConfig::with_objects(8, 10);
    cfg.train_frac = 1.0;
    let c = generate_corpus(&cfg).unwrap();
    let d = Dataset::new(c.scenes, c.samples, c.split).unwrap();
    let classes = d.class_names();
    let vocab = Vocabulary::build(&d.samples);
    let refs: Vec<_> = d.samples.iter().collect();
    let samples = prepare_samples(&d, &refs, &vocab, &classes, L_MAX, 16).unwrap();
    SmallData { samples, vocab, classes }
}

pub fn model_config(data: &SmallData, dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        heads: 4,
        joint_layers: 2,
        text_layers: 1,
        point_mlp_widths: vec![32, 64],
        num_classes: data.classes.len(),
        vocab_size: data.vocab.len(),
        num_points: 16,
        seed: 1,
        ..Default::default()
    }
}
