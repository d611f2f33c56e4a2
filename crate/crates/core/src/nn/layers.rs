//! Parameterized building blocks. Each layer only stores [`ParamId`]s; the
//! values live in a [`ParamStore`] so the same layout can be evaluated in
//! either precision.

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

fn uniform_tensor<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.range(-bound, bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn normal_tensor<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(std * rng.normal())).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `y = x·W + b`, weights stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(vec![in_dim, out_dim], bound, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, out_dim]))?;
        Ok(Linear { weight, bias: Some(bias), in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let ones = Tensor::new(vec![1, dim], vec![T::one(); dim])?;
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), ones)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![1, dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.table"), normal_tensor(vec![count, dim], 0.1, rng))?;
        Ok(Embedding { table, count, dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embedding(t, ids)
    }
}

/// A learned `rows × dim` matrix used directly (e.g. a special token).
pub fn learned_rows<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<ParamId> {
    store.add(name, normal_tensor(vec![rows, dim], 0.1, rng))
}

/// Scaled dot-product attention with learned Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Result of one attention call: the projected output and the per-head
/// attention probability maps (`Lq × Lk` each), still on the tape.
pub struct AttentionOutput {
    pub out: Var,
    pub maps: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `query: Lq × D`, `kv: Lk × D`. `key_valid` masks key columns.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let dh = self.dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut maps = Vec::with_capacity(self.heads);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
            };
            let logits = tape.matmul_bt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let probs = tape.softmax_rows_masked(logits, key_valid)?;
            head_outs.push(tape.matmul(probs, vh)?);
            maps.push(probs);
        }
        let merged = if self.heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
        let out = self.out.forward(tape, store, merged)?;
        Ok(AttentionOutput { out, maps })
    }
}

/// Pre-layer-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_dim, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, key_valid)?;
        let x = tape.add(x, a.out)?;
        let h = self.ln_ff.forward(tape, store, x)?;
        let h = self.ff_in.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.ff_out.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let err = MultiHeadAttention::new(&mut store, "a", 10, 4, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_key_gives_unit_attention() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::<f32>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.input(&normal_tensor(vec![3, 8], 1.0, &mut rng));
        let kv = tape.input(&normal_tensor(vec![1, 8], 1.0, &mut rng));
        let out = mha.forward(&mut tape, &store, q, kv, None).unwrap();
        for m in out.maps {
            assert!(tape.value(m).iter().all(|&p| p == 1.0));
        }
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f32>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.input(&normal_tensor(vec![3, 8], 1.0, &mut rng));
        let kv = tape.input(&normal_tensor(vec![4, 8], 1.0, &mut rng));
        let out = mha.forward(&mut tape, &store, q, kv, None).unwrap();
        assert_eq!(out.maps.len(), 2);
        for m in &out.maps {
            assert_eq!(tape.shape(*m), (3, 4));
            for row in tape.value(*m).chunks(4) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(tape.shape(out.out), (3, 8));
    }
}
