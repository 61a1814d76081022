//! Transformer encoder (post-layer-norm, learned absolute positions) and the
//! output heads built on top of it.
//!
//! Parameter containers are generic over their leaf type `P`: the same layout
//! holds shapes (`Vec<usize>`), values (`Tensor<T>`), tape handles (`Var`) or
//! gradients, and `map` walks the leaves in one fixed order with stable
//! dotted names. Initialization, binding to a tape, optimizer updates and
//! checkpointing all go through that walk.

mod config;
mod heads;

pub use config::{desk_scale_config, EncoderConfig};
pub use heads::{DiscHead, MlmHead};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttentionSpec, Scalar, Tape, Tensor, Var};
use crate::data::{TokenSequence, PAD};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense layer `x · weight + bias` with `weight: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Linear<Vec<usize>> {
    pub fn shape(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: vec![inputs, outputs],
            bias: vec![outputs],
        }
    }
}

impl Linear<Var> {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> Norm<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Norm<Q> {
        Norm {
            gain: f(&join(prefix, "gain"), &self.gain),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Norm<Vec<usize>> {
    pub fn shape(width: usize) -> Self {
        Norm {
            gain: vec![width],
            bias: vec![width],
        }
    }
}

impl Norm<Var> {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

/// One transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub attn_out: Linear<P>,
    pub attn_norm: Norm<P>,
    pub ffn_in: Linear<P>,
    pub ffn_out: Linear<P>,
    pub ffn_norm: Norm<P>,
}

impl<P> Layer<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Layer<Q> {
        Layer {
            query: self.query.map(&join(prefix, "query"), f),
            key: self.key.map(&join(prefix, "key"), f),
            value: self.value.map(&join(prefix, "value"), f),
            attn_out: self.attn_out.map(&join(prefix, "attn_out"), f),
            attn_norm: self.attn_norm.map(&join(prefix, "attn_norm"), f),
            ffn_in: self.ffn_in.map(&join(prefix, "ffn_in"), f),
            ffn_out: self.ffn_out.map(&join(prefix, "ffn_out"), f),
            ffn_norm: self.ffn_norm.map(&join(prefix, "ffn_norm"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), f);
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }
}

/// Weights of one encoder. `token_embedding` is `None` when the matrix is
/// borrowed from a partner network.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub config: EncoderConfig,
    pub token_embedding: Option<P>,
    pub position_embedding: P,
    pub embed_norm: Norm<P>,
    pub projection: Option<Linear<P>>,
    pub layers: Vec<Layer<P>>,
}

impl<P> EncoderParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            config: self.config.clone(),
            token_embedding: self
                .token_embedding
                .as_ref()
                .map(|e| f(&join(prefix, "token_embedding"), e)),
            position_embedding: f(&join(prefix, "position_embedding"), &self.position_embedding),
            embed_norm: self.embed_norm.map(&join(prefix, "embed_norm"), f),
            projection: self
                .projection
                .as_ref()
                .map(|p| p.map(&join(prefix, "projection"), f)),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layer{i}")), f))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        if let Some(e) = &mut self.token_embedding {
            f(&join(prefix, "token_embedding"), e);
        }
        f(&join(prefix, "position_embedding"), &mut self.position_embedding);
        self.embed_norm.visit_mut(&join(prefix, "embed_norm"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "projection"), f);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }

    /// Leaves in walk order with their dotted names.
    pub fn named(&self, prefix: &str) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(prefix, &mut |n, p| out.push((n.to_string(), p)));
        out
    }
}

impl EncoderParams<Vec<usize>> {
    pub fn shapes(config: &EncoderConfig, own_embedding: bool) -> Self {
        let (e, h, f) = (config.embed_size, config.hidden_size, config.ffn_size);
        EncoderParams {
            config: config.clone(),
            token_embedding: own_embedding.then(|| vec![config.vocab_size, e]),
            position_embedding: vec![config.max_seq_len, e],
            embed_norm: Norm::shape(e),
            projection: (e != h).then(|| Linear::shape(e, h)),
            layers: (0..config.num_layers)
                .map(|_| Layer {
                    query: Linear::shape(h, h),
                    key: Linear::shape(h, h),
                    value: Linear::shape(h, h),
                    attn_out: Linear::shape(h, h),
                    attn_norm: Norm::shape(h),
                    ffn_in: Linear::shape(h, f),
                    ffn_out: Linear::shape(f, h),
                    ffn_norm: Norm::shape(h),
                })
                .collect(),
        }
    }
}

/// Initial value of a leaf, chosen by its name: layer-norm gains are one,
/// biases zero, everything else truncated normal with std 0.02.
pub fn init_leaf<T: Scalar, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    if name.ends_with(".gain") || name == "gain" {
        Tensor::full(shape, T::one())
    } else if name.ends_with("bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::truncated_normal(shape, INIT_STD, rng)
    }
}

/// Whether decoupled weight decay applies to a leaf (not to biases or
/// layer-norm parameters).
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with(".gain") || name.contains("norm."))
}

/// Deterministic initialization of an encoder that owns its embedding.
pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<Tensor<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(EncoderParams::shapes(config, true).map("", &mut |n, s| init_leaf(n, s, &mut rng)))
}

/// A padded batch of id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Right-pads every sequence with `[PAD]` to the longest length.
    pub fn pad(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("batch".into()));
        }
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut valid = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
            valid.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            seq_len,
            valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Same layout with different ids (e.g. a corrupted copy).
    pub fn with_ids(&self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.rows() {
            return Err(Error::shape("batch", format!("{} ids for {} slots", ids.len(), self.rows())));
        }
        Ok(TokenBatch { ids, ..self.clone() })
    }
}

/// Dropout settings for a training-mode forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl EncoderParams<Var> {
    /// Hidden states `[batch * seq_len, hidden]`. `shared_embedding` is used
    /// when this encoder does not own its token embedding.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &TokenBatch,
        shared_embedding: Option<Var>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::Length {
                len: batch.seq_len,
                max: cfg.max_seq_len,
            });
        }
        let emb = self
            .token_embedding
            .or(shared_embedding)
            .ok_or_else(|| Error::Config("encoder has no token embedding".into()))?;
        let mut drop = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            match dropout.as_mut() {
                Some(d) => tape.dropout(x, d.rate, d.rng),
                None => Ok(x),
            }
        };

        let tok = tape.gather_rows(emb, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let pos = tape.gather_rows(self.position_embedding, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = self.embed_norm.apply(tape, x)?;
        let mut x = drop(tape, x)?;
        if let Some(p) = &self.projection {
            x = p.apply(tape, x)?;
        }

        for layer in &self.layers {
            let q = layer.query.apply(tape, x)?;
            let k = layer.key.apply(tape, x)?;
            let v = layer.value.apply(tape, x)?;
            let spec = AttentionSpec {
                batch: batch.batch,
                seq_len: batch.seq_len,
                heads: cfg.num_heads,
                head_size: cfg.head_size,
                key_valid: batch.valid.clone(),
            };
            let a = tape.attention(q, k, v, spec)?;
            let a = layer.attn_out.apply(tape, a)?;
            let a = drop(tape, a)?;
            let r = tape.add(x, a)?;
            x = layer.attn_norm.apply(tape, r)?;

            let f = layer.ffn_in.apply(tape, x)?;
            let f = tape.gelu(f)?;
            let f = layer.ffn_out.apply(tape, f)?;
            let f = drop(tape, f)?;
            let r = tape.add(x, f)?;
            x = layer.ffn_norm.apply(tape, r)?;
        }
        Ok(x)
    }
}

/// Binds every leaf as a differentiable tape input.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &EncoderParams<Tensor<T>>) -> EncoderParams<Var> {
    params.map("", &mut |_, t| tape.leaf(t.clone()))
}

/// Eval-mode hidden states `[n, hidden]` of one sequence.
pub fn encode<T: Scalar>(params: &EncoderParams<Tensor<T>>, tokens: &TokenSequence) -> Result<Tensor<T>> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.ids().iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id,
            size: cfg.vocab_size,
        });
    }
    let mut tape = Tape::new();
    let vars = params.map("", &mut |_, t| tape.constant(t.clone()));
    let batch = TokenBatch::pad(&[tokens.ids()])?;
    let h = vars.forward(&mut tape, &batch, None, None)?;
    Ok(tape.value(h).clone())
}
