//! Samples converted once into model inputs plus every supervision target.

use std::collections::{HashMap, HashSet};

use crate::dataset::{
    build_gt_alignment, parse_target_phrase, soft_targets, spans_to_masks, Dataset, GroundingSample, PhraseSpan, Tags,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{scene_tensors, ModelInput};
use crate::nn::Tensor;
use crate::scenegen::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub tags: Tags,
    pub tokens: Vec<String>,
    /// Zero-mask model input.
    pub input: ModelInput,
    pub target_id: usize,
    pub phrases: Vec<PhraseSpan>,
    /// One token mask per phrase.
    pub masks: Vec<Vec<u8>>,
    /// Row-normalized alignment targets, `M x (L + 1)`.
    pub soft_gt: Tensor<f32>,
    /// Class index of every object.
    pub obj_labels: Vec<usize>,
    /// 1 on the target phrase's tokens.
    pub target_mask: Vec<f32>,
}

impl PreparedSample {
    pub fn num_objects(&self) -> usize {
        self.obj_labels.len()
    }

    pub fn target_class(&self) -> usize {
        self.obj_labels[self.target_id]
    }

    /// Replaces the phrase annotations, rebuilding masks and targets.
    pub fn with_phrases(&self, phrases: Vec<PhraseSpan>) -> Result<Self> {
        let sample = GroundingSample {
            sample_id: self.sample_id.clone(),
            scene_id: String::new(),
            tokens: self.tokens.clone(),
            target_id: self.target_id,
            phrases,
            tags: self.tags,
        };
        sample.validate()?;
        let (masks, soft_gt, target_mask) = targets(&sample, self.num_objects())?;
        Ok(PreparedSample { phrases: sample.phrases, masks, soft_gt, target_mask, ..self.clone() })
    }

    /// Target-only view from the rule-based parser; `None` on a parse miss.
    pub fn weak_view(&self, classes: &HashSet<String>) -> Option<Self> {
        let (start, end) = parse_target_phrase(&self.tokens, classes)?;
        self.with_phrases(vec![PhraseSpan { start, end, object_id: self.target_id, is_target: true }]).ok()
    }
}

type Targets = (Vec<Vec<u8>>, Tensor<f32>, Vec<f32>);

fn targets(sample: &GroundingSample, m: usize) -> Result<Targets> {
    let l = sample.tokens.len();
    let set = spans_to_masks(&sample.phrases, l);
    let masks = set.iter().map(<[u8]>::to_vec).collect();
    let soft_gt = soft_targets(&build_gt_alignment(sample, m)?)?.cast();
    let mut target_mask = vec![0.0; l];
    if let Some(t) = sample.target_span() {
        target_mask[t.tokens()].iter_mut().for_each(|b| *b = 1.0);
    }
    Ok((masks, soft_gt, target_mask))
}

/// Index of each class name.
pub fn class_index(classes: &[String]) -> HashMap<&str, usize> {
    classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
}

pub fn prepare_sample(
    scene: &Scene,
    geometry: &(Tensor<f32>, Tensor<f32>),
    sample: &GroundingSample,
    vocab: &Vocabulary,
    classes: &HashMap<&str, usize>,
    l_max: usize,
) -> Result<PreparedSample> {
    sample.validate_against(scene)?;
    let obj_labels = scene
        .objects
        .iter()
        .map(|o| {
            classes.get(o.label.as_str()).copied().ok_or_else(|| Error::Validation(format!("unknown class {}", o.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let padded = vocab.encode(&sample.tokens, l_max)?;
    let l = sample.tokens.len();
    let input = ModelInput {
        points: geometry.0.clone(),
        boxes: geometry.1.clone(),
        token_ids: padded[..l + 1].to_vec(),
        mask: vec![0.0; l],
    };
    let (masks, soft_gt, target_mask) = targets(sample, scene.objects.len())?;
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        tags: sample.tags,
        tokens: sample.tokens.clone(),
        input,
        target_id: sample.target_id,
        phrases: sample.phrases.clone(),
        masks,
        soft_gt,
        obj_labels,
        target_mask,
    })
}

/// Prepares samples of one dataset, sampling each scene's points once.
pub fn prepare_samples(
    dataset: &Dataset,
    samples: &[&GroundingSample],
    vocab: &Vocabulary,
    classes: &[String],
    l_max: usize,
    num_points: usize,
) -> Result<Vec<PreparedSample>> {
    let index = class_index(classes);
    let mut geometry: HashMap<&str, (Tensor<f32>, Tensor<f32>)> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let scene = dataset
            .scene(&s.scene_id)
            .ok_or_else(|| Error::Validation(format!("{}: unknown scene {}", s.sample_id, s.scene_id)))?;
        if !geometry.contains_key(s.scene_id.as_str()) {
            geometry.insert(s.scene_id.as_str(), scene_tensors(scene, num_points)?);
        }
        out.push(prepare_sample(scene, &geometry[s.scene_id.as_str()], s, vocab, &index, l_max)?);
    }
    Ok(out)
}
