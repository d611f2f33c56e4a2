use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scenegen::{sample_points, Scene, SceneObject};

pub const MIN_POINTS: usize = 8;

/// Everything one forward pass reads. Padding is trimmed: the text part
/// holds `[CLS]` plus the `L` real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `(M * n) x 6` object-centered xyz and rgb, objects stacked in order.
    pub points: Tensor<f32>,
    /// `M x 6` box center and size.
    pub boxes: Tensor<f32>,
    /// `[CLS]` followed by the `L` token ids.
    pub token_ids: Vec<usize>,
    /// One mask bit per token; all zeros means no phrase is highlighted.
    pub mask: Vec<f32>,
}

impl ModelInput {
    pub fn num_objects(&self) -> usize {
        self.boxes.rows()
    }

    pub fn points_per_object(&self) -> usize {
        self.points.rows() / self.num_objects().max(1)
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len().saturating_sub(1)
    }

    /// Same input with another mask channel.
    pub fn with_mask(&self, mask: &[u8]) -> Result<Self> {
        if mask.len() != self.num_tokens() {
            return Err(Error::Validation(format!("mask of {} bits for {} tokens", mask.len(), self.num_tokens())));
        }
        Ok(ModelInput { mask: mask.iter().map(|&b| b as f32).collect(), ..self.clone() })
    }

    pub fn set_mask(&mut self, mask: &[u8]) {
        self.mask.clear();
        self.mask.extend(mask.iter().map(|&b| b as f32));
    }

    pub fn clear_mask(&mut self) {
        self.mask.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Surface points of one object with xyz taken relative to its center.
pub fn centered_points(obj: &SceneObject, n: usize) -> Result<Tensor<f32>> {
    let mut pts = sample_points(obj, n)?;
    let c = obj.center.map(|v| v as f32);
    for row in pts.data_mut().chunks_mut(6) {
        for d in 0..3 {
            row[d] -= c[d];
        }
    }
    Ok(pts)
}

/// Scene geometry as the stacked point and box tensors.
pub fn scene_tensors(scene: &Scene, num_points: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let m = scene.objects.len();
    let mut points = Vec::with_capacity(m * num_points * 6);
    let mut boxes = Vec::with_capacity(m * 6);
    for o in &scene.objects {
        points.extend_from_slice(centered_points(o, num_points)?.data());
        boxes.extend(o.box6().iter().map(|&v| v as f32));
    }
    Ok((Tensor::matrix(m * num_points, 6, points)?, Tensor::matrix(m, 6, boxes)?))
}

/// Builds the input for a tokenized sentence over a scene with an all-zero mask.
pub fn build_input<S: AsRef<str>>(
    scene: &Scene,
    tokens: &[S],
    vocab: &Vocabulary,
    l_max: usize,
    num_points: usize,
) -> Result<ModelInput> {
    let (points, boxes) = scene_tensors(scene, num_points)?;
    let padded = vocab.encode(tokens, l_max)?;
    let token_ids = padded[..tokens.len() + 1].to_vec();
    Ok(ModelInput { points, boxes, token_ids, mask: vec![0.0; tokens.len()] })
}
