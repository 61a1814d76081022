use super::{join, Linear, Norm};
use crate::autograd::{Scalar, Tape, Var};
use crate::error::Result;

/// Full-vocabulary prediction head with output weights tied to the token
/// embedding: `logits = LN(gelu(h · W + b)) · Embᵀ + out_bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead<P> {
    pub dense: Linear<P>,
    pub norm: Norm<P>,
    pub output_bias: P,
}

impl<P> MlmHead<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> MlmHead<Q> {
        MlmHead {
            dense: self.dense.map(&join(prefix, "dense"), f),
            norm: self.norm.map(&join(prefix, "norm"), f),
            output_bias: f(&join(prefix, "output_bias"), &self.output_bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        f(&join(prefix, "output_bias"), &mut self.output_bias);
    }
}

impl MlmHead<Vec<usize>> {
    pub fn shape(hidden: usize, embed: usize, vocab: usize) -> Self {
        MlmHead {
            dense: Linear::shape(hidden, embed),
            norm: Norm::shape(embed),
            output_bias: vec![vocab],
        }
    }
}

impl MlmHead<Var> {
    /// `[rows, vocab]` logits for hidden rows `h: [rows, hidden]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, embedding: Var) -> Result<Var> {
        let t = self.dense.apply(tape, h)?;
        let t = tape.gelu(t)?;
        let t = self.norm.apply(tape, t)?;
        let l = tape.matmul_t(t, embedding)?;
        tape.add_bias(l, self.output_bias)
    }
}

/// Replaced-token detector: `p_i = sigmoid(wᵀ h_i)`, the probability that
/// position `i` holds the original token.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscHead<P> {
    pub weight: P,
}

impl<P> DiscHead<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P) -> Q) -> DiscHead<Q> {
        DiscHead {
            weight: f(&join(prefix, "weight"), &self.weight),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

impl DiscHead<Vec<usize>> {
    pub fn shape(hidden: usize) -> Self {
        DiscHead {
            weight: vec![hidden, 1],
        }
    }
}

impl DiscHead<Var> {
    /// `[rows]` probabilities.
    pub fn probs<T: Scalar>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let logit = tape.matmul(h, self.weight)?;
        let rows = tape.value(logit).shape()[0];
        let logit = tape.reshape(logit, &[rows])?;
        tape.sigmoid(logit)
    }
}
