//! Cross-modal grounding transformer. Objects and text are encoded
//! separately, mixed by a joint self-attention stack, then fused by one
//! cross-attention layer whose head-averaged map is the phrase-object
//! alignment (POA) map `C`.

mod checkpoint;
mod input;

use serde::{Deserialize, Serialize};

use crate::dataset::{L_MAX, M_MAX};
use crate::error::{Error, Result};
use crate::nn::{
    learned_rows, Embedding, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Rng, Scalar, Tape, Tensor,
    TransformerBlock, Var,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use input::{build_input, centered_points, scene_tensors, ModelInput, MIN_POINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub joint_layers: usize,
    pub text_layers: usize,
    pub point_mlp_widths: Vec<usize>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub num_points: usize,
    pub l_max: usize,
    pub m_max: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            joint_layers: 3,
            text_layers: 2,
            point_mlp_widths: vec![32, 64, 128],
            num_classes: 20,
            vocab_size: 64,
            num_points: 32,
            l_max: L_MAX,
            m_max: M_MAX,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.point_mlp_widths.is_empty() || self.point_mlp_widths.contains(&0) {
            return Err(Error::Config("point_mlp_widths must be nonempty and positive".into()));
        }
        if self.num_classes == 0 || self.vocab_size < 4 {
            return Err(Error::Config("num_classes and vocab_size must be positive".into()));
        }
        if self.num_points < MIN_POINTS {
            return Err(Error::Config(format!("num_points must be at least {MIN_POINTS}")));
        }
        if self.l_max == 0 || self.m_max == 0 {
            return Err(Error::Config("l_max and m_max must be positive".into()));
        }
        Ok(())
    }
}

/// Forward results for one sample, all of them `f32` copies off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Grounding score per object (`M`).
    pub scores: Vec<f32>,
    /// Row-stochastic `M x (L + 1)` alignment map.
    pub poa: Tensor<f32>,
    pub obj_class_logits: Tensor<f32>,
    pub cls_target_logits: Vec<f32>,
    pub target_mask_logits: Vec<f32>,
}

impl ModelOutput {
    /// Highest-scoring object; ties go to the lowest id.
    pub fn predicted_target(&self) -> usize {
        argmax(&self.scores)
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    /// `M x 1`
    pub scores: Var,
    /// `M x (L + 1)`
    pub poa: Var,
    /// `M x num_classes`
    pub obj_class_logits: Var,
    /// `1 x num_classes`
    pub cls_target_logits: Var,
    /// `L x 1`
    pub target_mask_logits: Var,
    /// `M x D` object tokens after the joint stack.
    pub objects: Var,
    /// `(L + 1) x D` text tokens after the joint stack.
    pub text: Var,
}

#[derive(Clone, Debug)]
struct Arch {
    point_mlp: Vec<Linear>,
    obj_class: Linear,
    box_pos: Linear,
    obj_proj: Linear,
    tok_emb: Embedding,
    pos_emb: Embedding,
    text_proj: Linear,
    text_blocks: Vec<TransformerBlock>,
    cls_class: Linear,
    joint_blocks: Vec<TransformerBlock>,
    fuse_ln_q: LayerNorm,
    fuse_ln_kv: LayerNorm,
    fuse_attn: MultiHeadAttention,
    no_obj: ParamId,
    score_ln: LayerNorm,
    score_hidden: Linear,
    score_out: Linear,
    mask_head: Linear,
}

impl Arch {
    fn new<T: Scalar>(c: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        c.validate()?;
        let rng = &mut Rng::derive(c.seed, 0x30de1);
        let d = c.dim;
        let mut point_mlp = Vec::new();
        let mut prev = 6;
        for (i, &w) in c.point_mlp_widths.iter().enumerate() {
            point_mlp.push(Linear::new(store, &format!("objenc.mlp{i}"), prev, w, rng)?);
            prev = w;
        }
        let global = prev;
        let block = |store: &mut ParamStore<T>, name: String, rng: &mut Rng| {
            TransformerBlock::new(store, &name, d, c.heads, 2 * d, rng)
        };
        Ok(Arch {
            point_mlp,
            obj_class: Linear::new(store, "objenc.class", global, c.num_classes, rng)?,
            box_pos: Linear::new(store, "objenc.box", 6, d, rng)?,
            obj_proj: Linear::new(store, "objenc.proj", global + d, d, rng)?,
            tok_emb: Embedding::new(store, "textenc.tokens", c.vocab_size, d, rng)?,
            pos_emb: Embedding::new(store, "textenc.positions", c.l_max + 1, d, rng)?,
            text_proj: Linear::new(store, "textenc.proj", d + 1, d, rng)?,
            text_blocks: (0..c.text_layers)
                .map(|i| block(store, format!("textenc.block{i}"), rng))
                .collect::<Result<_>>()?,
            cls_class: Linear::new(store, "textenc.class", d, c.num_classes, rng)?,
            joint_blocks: (0..c.joint_layers).map(|i| block(store, format!("joint.block{i}"), rng)).collect::<Result<_>>()?,
            fuse_ln_q: LayerNorm::new(store, "fusion.ln_q", d)?,
            fuse_ln_kv: LayerNorm::new(store, "fusion.ln_kv", d)?,
            fuse_attn: MultiHeadAttention::new(store, "fusion.attn", d, c.heads, rng)?,
            no_obj: learned_rows(store, "fusion.no_obj", 1, d, rng)?,
            score_ln: LayerNorm::new(store, "score.ln", d)?,
            score_hidden: Linear::new(store, "score.hidden", d, d, rng)?,
            score_out: Linear::new(store, "score.out", d, 1, rng)?,
            mask_head: Linear::new(store, "mask.head", d, 1, rng)?,
        })
    }
}

pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model { config: self.config.clone(), store: self.store.clone(), arch: self.arch.clone() }
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Arch::new(&config, &mut store)?;
        Ok(Model { config, store, arch })
    }

    /// Same architecture with every parameter converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast(), arch: self.arch.clone() }
    }

    /// Same architecture over another parameter store with identical layout.
    pub fn with_store(&self, store: ParamStore<T>) -> Result<Self> {
        let same = store.len() == self.store.len()
            && store.iter().zip(self.store.iter()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Config("parameter store does not match the model layout".into()));
        }
        Ok(Model { config: self.config.clone(), store, arch: self.arch.clone() })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        let m = input.num_objects();
        if m == 0 || m > c.m_max {
            return Err(Error::Validation(format!("{m} objects outside 1..={}", c.m_max)));
        }
        if input.points_per_object() < MIN_POINTS {
            return Err(Error::Validation(format!(
                "{} points per object, need at least {MIN_POINTS}",
                input.points_per_object()
            )));
        }
        let l = input.num_tokens();
        if l == 0 || l > c.l_max {
            return Err(Error::Validation(format!("{l} tokens outside 1..={}", c.l_max)));
        }
        if let Some(&bad) = input.token_ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Validation(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if input.mask.len() != l || input.mask.iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::Validation(format!("mask channel must hold {l} values in {{0, 1}}")));
        }
        Ok(())
    }

    /// Object tokens `M x D` and per-object class logits.
    pub fn encode_objects(&self, tape: &mut Tape<T>, input: &ModelInput) -> Result<(Var, Var)> {
        let a = &self.arch;
        let s = &self.store;
        let mut h = tape.input(&input.points.cast());
        for layer in &a.point_mlp {
            h = layer.forward(tape, s, h)?;
            h = tape.relu(h);
        }
        let global = tape.max_pool_groups(h, input.points_per_object())?;
        let logits = a.obj_class.forward(tape, s, global)?;
        let boxes = tape.input(&input.boxes.cast());
        let pos = a.box_pos.forward(tape, s, boxes)?;
        let joined = tape.concat_cols(&[global, pos])?;
        Ok((a.obj_proj.forward(tape, s, joined)?, logits))
    }

    /// Text tokens `(L + 1) x D` (row 0 is `[CLS]`) and target-class logits.
    pub fn encode_text(&self, tape: &mut Tape<T>, input: &ModelInput) -> Result<(Var, Var)> {
        let a = &self.arch;
        let s = &self.store;
        let n = input.token_ids.len();
        let tok = a.tok_emb.forward(tape, s, &input.token_ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = a.pos_emb.forward(tape, s, &positions)?;
        let x = tape.add(tok, pos)?;
        let mut bits = Vec::with_capacity(n);
        bits.push(T::zero());
        bits.extend(input.mask.iter().map(|&b| T::of(b as f64)));
        let bits = tape.input_matrix(n, 1, bits)?;
        let x = tape.concat_cols(&[x, bits])?;
        let mut x = a.text_proj.forward(tape, s, x)?;
        for b in &a.text_blocks {
            x = b.forward(tape, s, x, None)?;
        }
        let cls = tape.slice_rows(x, 0, 1)?;
        let logits = a.cls_class.forward(tape, s, cls)?;
        Ok((x, logits))
    }

    /// Shared self-attention over the concatenated object and text tokens.
    pub fn joint_transform(&self, tape: &mut Tape<T>, objects: Var, text: Var) -> Result<(Var, Var)> {
        if self.arch.joint_blocks.is_empty() {
            return Ok((objects, text));
        }
        let m = tape.shape(objects).0;
        let n = tape.shape(text).0;
        let mut x = tape.concat_rows(&[objects, text])?;
        for b in &self.arch.joint_blocks {
            x = b.forward(tape, &self.store, x, None)?;
        }
        Ok((tape.slice_rows(x, 0, m)?, tape.slice_rows(x, m, m + n)?))
    }

    /// Objects attend to the sentence tokens plus `[NoObj]`. Returns the
    /// fused objects (with residual) and the head-averaged map.
    pub fn poa_cross_attention(&self, tape: &mut Tape<T>, objects: Var, text: Var) -> Result<(Var, Var)> {
        let a = &self.arch;
        let s = &self.store;
        let n = tape.shape(text).0;
        let words = tape.slice_rows(text, 1, n)?;
        let no_obj = tape.param(s, a.no_obj);
        let keys = tape.concat_rows(&[words, no_obj])?;
        let q = a.fuse_ln_q.forward(tape, s, objects)?;
        let kv = a.fuse_ln_kv.forward(tape, s, keys)?;
        let att = a.fuse_attn.forward(tape, s, q, kv, None)?;
        let poa = if att.maps.len() == 1 { att.maps[0] } else { tape.mean_of(&att.maps)? };
        let fused = tape.add(objects, att.out)?;
        Ok((fused, poa))
    }

    pub fn score(&self, tape: &mut Tape<T>, fused: Var) -> Result<Var> {
        let a = &self.arch;
        let s = &self.store;
        let h = a.score_ln.forward(tape, s, fused)?;
        let h = a.score_hidden.forward(tape, s, h)?;
        let h = tape.relu(h);
        a.score_out.forward(tape, s, h)
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, input: &ModelInput) -> Result<OutputVars> {
        self.check_input(input)?;
        let (objects, obj_class_logits) = self.encode_objects(tape, input)?;
        let (text, cls_target_logits) = self.encode_text(tape, input)?;
        let (objects, text) = self.joint_transform(tape, objects, text)?;
        let (fused, poa) = self.poa_cross_attention(tape, objects, text)?;
        let scores = self.score(tape, fused)?;
        let n = tape.shape(text).0;
        let words = tape.slice_rows(text, 1, n)?;
        let target_mask_logits = self.arch.mask_head.forward(tape, &self.store, words)?;
        Ok(OutputVars { scores, poa, obj_class_logits, cls_target_logits, target_mask_logits, objects, text })
    }

    /// Inference: forward pass with values copied off the tape.
    pub fn forward(&self, input: &ModelInput) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let v = self.forward_tape(&mut tape, input)?;
        let to32 = |t: &Tape<T>, var: Var| -> Vec<f32> { t.value(var).iter().map(|x| x.as_f64() as f32).collect() };
        let (m, cols) = tape.shape(v.poa);
        let out = ModelOutput {
            scores: to32(&tape, v.scores),
            poa: Tensor::matrix(m, cols, to32(&tape, v.poa))?,
            obj_class_logits: Tensor::matrix(m, self.config.num_classes, to32(&tape, v.obj_class_logits))?,
            cls_target_logits: to32(&tape, v.cls_target_logits),
            target_mask_logits: to32(&tape, v.target_mask_logits),
        };
        if !out.scores.iter().all(|x| x.is_finite()) || !out.poa.all_finite() {
            return Err(Error::NonFinite("forward pass produced non-finite scores or map".into()));
        }
        Ok(out)
    }
}
