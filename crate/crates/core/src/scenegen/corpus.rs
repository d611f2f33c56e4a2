use serde::{Deserialize, Serialize};

use super::describe::{any_accepted, describe_from};
use super::{enumerate_triples, generate_scene, Scene, SceneConfig, TagFilter, Thresholds, Triple};
use crate::dataset::{GroundingSample, Split};
use crate::error::{Error, Result};
use crate::nn::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Requested fraction of hard samples; unconstrained when `None`.
    pub hard_frac: Option<f64>,
    /// Requested fraction of view-dependent samples; unconstrained when `None`.
    pub viewdep_frac: Option<f64>,
    pub train_frac: f64,
    pub scene: SceneConfig,
    pub thresholds: Thresholds,
}

impl CorpusConfig {
    pub fn new(scenes: usize, samples: usize, seed: u64) -> Self {
        CorpusConfig {
            scenes,
            samples,
            seed,
            hard_frac: None,
            viewdep_frac: None,
            train_frac: 0.8,
            scene: SceneConfig::default(),
            thresholds: Thresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.samples == 0 {
            return Err(Error::Config("scenes and samples must be positive".into()));
        }
        for (name, f) in [("hard_frac", self.hard_frac), ("viewdep_frac", self.viewdep_frac)] {
            if let Some(f) = f {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("{name} {f} outside [0, 1]")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config(format!("train_frac {} outside [0, 1]", self.train_frac)));
        }
        self.scene.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub samples: Vec<GroundingSample>,
    /// The relation behind each sample, index-aligned with `samples`.
    pub triples: Vec<Triple>,
    pub split: Split,
}

/// Exactly `round(n * frac)` flags set, in shuffled order.
fn quota(n: usize, frac: Option<f64>, rng: &mut Rng) -> Vec<Option<bool>> {
    let Some(f) = frac else { return vec![None; n] };
    let k = (n as f64 * f).round() as usize;
    let mut flags: Vec<Option<bool>> = (0..n).map(|i| Some(i < k)).collect();
    rng.shuffle(&mut flags);
    flags
}

/// Generates scenes, then one sentence per sample slot. Requested tag
/// proportions are met exactly by assigning tags up front and searching the
/// scenes round-robin for one that admits a matching triple.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = Rng::derive(config.seed, 0xc0);
    let mut scenes = Vec::with_capacity(config.scenes);
    for i in 0..config.scenes {
        let mut scene = generate_scene(&config.scene, rng.next_u64())?;
        scene.scene_id = format!("scene{i:05}");
        scenes.push(scene);
    }
    let triples: Vec<Vec<Triple>> = scenes.iter().map(|s| enumerate_triples(s, &config.thresholds)).collect();

    let hard = quota(config.samples, config.hard_frac, &mut rng);
    let view = quota(config.samples, config.viewdep_frac, &mut rng);
    let mut samples = Vec::with_capacity(config.samples);
    let mut sample_triples = Vec::with_capacity(config.samples);
    for k in 0..config.samples {
        let filter = TagFilter { hard: hard[k], view_dep: view[k] };
        let n = scenes.len();
        let chosen = (0..n)
            .map(|j| (k + j) % n)
            .find(|&i| any_accepted(&scenes[i], &triples[i], filter))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "no scene admits a sentence with tags hard={:?} view_dep={:?}",
                    filter.hard, filter.view_dep
                ))
            })?;
        let (mut sample, triple) = describe_from(&scenes[chosen], &triples[chosen], &mut rng, filter)
            .expect("scene was checked to admit the filter");
        sample.sample_id = format!("s{k:06}");
        samples.push(sample);
        sample_triples.push(triple);
    }

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    rng.shuffle(&mut order);
    let n_train = (scenes.len() as f64 * config.train_frac).round() as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    let ids = |v: Vec<usize>| v.into_iter().map(|i| scenes[i].scene_id.clone()).collect();
    let split = Split { train: ids(train), val: ids(val) };
    Ok(Corpus { scenes, samples, triples: sample_triples, split })
}

impl Corpus {
    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Fraction of samples carrying each tag.
    pub fn tag_fractions(&self) -> TagFractions {
        tag_fractions(&self.samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagFractions {
    pub hard: f64,
    pub view_dep: f64,
}

/// Hard and view-dependent fractions over a sample list.
pub fn tag_fractions(samples: &[GroundingSample]) -> TagFractions {
    let n = samples.len().max(1) as f64;
    TagFractions {
        hard: samples.iter().filter(|s| s.tags.hard).count() as f64 / n,
        view_dep: samples.iter().filter(|s| s.tags.view_dep).count() as f64 / n,
    }
}
