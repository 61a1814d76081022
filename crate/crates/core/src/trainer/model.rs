use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{TrainConfig, Variant};
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::encoder::{init_leaf, DiscHead, EncoderParams, Linear, MlmHead, INIT_STD};
use crate::error::Result;

/// Both networks of a run plus their heads. The main encoder always reads
/// the top-level `embedding`; the auxiliary network (controller or ELECTRA
/// generator) shares it unless it owns `aux.token_embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<P> {
    pub variant: Variant,
    pub embedding: P,
    pub main: EncoderParams<P>,
    pub aux: Option<EncoderParams<P>>,
    pub aux_head: Option<MlmHead<P>>,
    /// Full-vocabulary head on the main network (roberta, electra-complex).
    pub mlm_head: Option<MlmHead<P>>,
    pub disc_head: Option<DiscHead<P>>,
    /// Maps main hidden states to embedding width for candidate scoring
    /// when the two differ.
    pub mc_proj: Option<Linear<P>>,
}

pub const AUX_PREFIXES: [&str; 2] = ["aux.", "aux_head."];

/// Whether a leaf belongs only to the auxiliary network.
pub fn is_aux_leaf(name: &str) -> bool {
    AUX_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl<P> Model<P> {
    pub fn map<'a, Q>(&'a self, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Model<Q> {
        Model {
            variant: self.variant,
            embedding: f("embedding", &self.embedding),
            main: self.main.map("main", f),
            aux: self.aux.as_ref().map(|a| a.map("aux", f)),
            aux_head: self.aux_head.as_ref().map(|h| h.map("aux_head", f)),
            mlm_head: self.mlm_head.as_ref().map(|h| h.map("mlm_head", f)),
            disc_head: self.disc_head.as_ref().map(|h| h.map("disc_head", f)),
            mc_proj: self.mc_proj.as_ref().map(|h| h.map("mc_proj", f)),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        f("embedding", &mut self.embedding);
        self.main.visit_mut("main", f);
        if let Some(a) = &mut self.aux {
            a.visit_mut("aux", f);
        }
        if let Some(h) = &mut self.aux_head {
            h.visit_mut("aux_head", f);
        }
        if let Some(h) = &mut self.mlm_head {
            h.visit_mut("mlm_head", f);
        }
        if let Some(h) = &mut self.disc_head {
            h.visit_mut("disc_head", f);
        }
        if let Some(h) = &mut self.mc_proj {
            h.visit_mut("mc_proj", f);
        }
    }

    /// Leaves in walk order with their dotted names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(&mut |n, p| out.push((n.to_string(), p)));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map(&mut |_, p| out.push(p));
        out
    }

    /// Rebuilds the same structure from leaves given in walk order.
    pub fn rebuild<Q: Clone>(&self, leaves: &[Q]) -> Model<Q> {
        let mut it = leaves.iter();
        self.map(&mut |_, _| it.next().expect("leaf count matches").clone())
    }
}

impl Model<Vec<usize>> {
    pub fn shapes(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        let variant = cfg.variant;
        let main_cfg = cfg.main_encoder(vocab_size)?;
        let (e, h) = (main_cfg.embed_size, main_cfg.hidden_size);
        let aux = if variant.has_aux() {
            let aux_cfg = cfg.aux_encoder(vocab_size)?;
            if aux_cfg.embed_size != e && cfg.share_embeddings {
                return Err(crate::Error::Config(format!(
                    "shared embeddings need equal widths, main {e} vs auxiliary {}",
                    aux_cfg.embed_size
                )));
            }
            Some(aux_cfg)
        } else {
            None
        };
        Ok(Model {
            variant,
            embedding: vec![vocab_size, e],
            main: EncoderParams::shapes(&main_cfg, false),
            aux_head: aux
                .as_ref()
                .map(|a| MlmHead::shape(a.hidden_size, a.embed_size, vocab_size)),
            aux: aux.as_ref().map(|a| EncoderParams::shapes(a, !cfg.share_embeddings)),
            mlm_head: matches!(variant, Variant::Roberta | Variant::ElectraComplex)
                .then(|| MlmHead::shape(h, e, vocab_size)),
            disc_head: matches!(variant, Variant::Electra | Variant::ElectraSample).then(|| DiscHead::shape(h)),
            mc_proj: (variant.is_mc() && h != e).then(|| Linear::shape(h, e)),
        })
    }
}

/// Seeded initialization of every leaf.
pub fn init_model<T: Scalar>(cfg: &TrainConfig, vocab_size: usize) -> Result<Model<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Model::shapes(cfg, vocab_size)?.map(&mut |n, s| {
        if n == "embedding" {
            Tensor::truncated_normal(s, INIT_STD, &mut rng)
        } else {
            init_leaf(n, s, &mut rng)
        }
    }))
}

/// Binds every leaf as a differentiable tape input.
pub fn bind_model<T: Scalar>(tape: &mut Tape<T>, model: &Model<Tensor<T>>) -> Model<Var> {
    model.map(&mut |_, t| tape.leaf(t.clone()))
}

/// Total number of scalar parameters.
pub fn parameter_count<T: Scalar>(model: &Model<Tensor<T>>) -> usize {
    model.leaves().iter().map(|t| t.len()).sum()
}
