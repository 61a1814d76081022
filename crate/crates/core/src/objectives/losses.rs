use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::candidates::CandidateSet;
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How per-position losses are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossReduction {
    /// Average over scored positions.
    Mean,
    /// Sum over scored positions, averaged over the sequences of a batch.
    Sum,
}

impl fmt::Display for LossReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(Error::Config(format!("unknown loss reduction `{other}`"))),
        }
    }
}

impl LossReduction {
    fn divisor(self, positions: usize, sequences: usize) -> f64 {
        match self {
            LossReduction::Mean => positions as f64,
            LossReduction::Sum => sequences.max(1) as f64,
        }
    }
}

fn reduce<T: Scalar>(
    tape: &mut Tape<T>,
    per_position: Var,
    positions: usize,
    sequences: usize,
    reduction: LossReduction,
) -> Result<Var> {
    let s = tape.sum(per_position)?;
    tape.scale(s, 1.0 / reduction.divisor(positions, sequences))
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Negative log-likelihood of `targets[j] = (row, token)` under the
/// row-wise softmax of `logits: [rows, vocab]`. `None` when `targets` is
/// empty (the loss is then defined as 0 and the caller should count it).
pub fn token_nll<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[(usize, usize)],
    sequences: usize,
    reduction: LossReduction,
) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, targets)?;
    let neg = tape.scale(picked, -1.0)?;
    reduce(tape, neg, targets.len(), sequences, reduction).map(Some)
}

/// Masked-LM loss over the masked positions: rows of `logits` paired with
/// the original token at each. Zero masked positions give a constant 0.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[(usize, usize)],
    sequences: usize,
    reduction: LossReduction,
) -> Result<(Var, bool)> {
    match token_nll(tape, logits, targets, sequences, reduction)? {
        Some(v) => Ok((v, false)),
        None => Ok((zero(tape), true)),
    }
}

/// Full-vocabulary reconstruction of the original token at every scored
/// position of the corrupted input (ELECTRA-complex).
pub fn electra_complex_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[(usize, usize)],
    sequences: usize,
    reduction: LossReduction,
) -> Result<Var> {
    match token_nll(tape, logits, targets, sequences, reduction)? {
        Some(v) => Ok(v),
        None => Ok(zero(tape)),
    }
}

/// `sigmoid(wᵀh)` on plain vectors.
pub fn disc_prob(w: &[f64], h: &[f64]) -> Result<f64> {
    if w.len() != h.len() {
        return Err(Error::shape("disc_prob", format!("w has {} entries, h has {}", w.len(), h.len())));
    }
    let s: f64 = w.iter().zip(h).map(|(a, b)| a * b).sum();
    Ok(1.0 / (1.0 + (-s).exp()))
}

/// Binary cross-entropy of "original" probabilities `probs: [rows]` at
/// `rows`, where `replaced[j]` flags row `rows[j]` as replaced.
pub fn disc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    rows: &[usize],
    replaced: &[bool],
    sequences: usize,
    reduction: LossReduction,
) -> Result<Var> {
    if rows.len() != replaced.len() {
        return Err(Error::shape("disc_loss", "rows and flags differ in length"));
    }
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let n = tape.value(probs).len();
    let col = tape.reshape(probs, &[n, 1])?;
    let idx: Vec<(usize, usize)> = rows.iter().map(|&r| (r, 0)).collect();
    let picked = tape.pick(col, &idx)?;
    let nll = tape.binary_nll(picked, replaced, PROB_FLOOR)?;
    reduce(tape, nll, rows.len(), sequences, reduction)
}

/// Log-probabilities `[sets, k]` of each candidate: a softmax over the dot
/// products of candidate embedding rows (including `[NOTA]`'s own row) with
/// the hidden state at the set's position. `hidden` is `[rows, embed]` and
/// `row_of[j]` is the hidden row for `sets[j]`.
pub fn candidate_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: Var,
    embedding: Var,
    sets: &[CandidateSet],
    row_of: &[usize],
) -> Result<Var> {
    if sets.is_empty() || sets.len() != row_of.len() {
        return Err(Error::shape("candidates", "one hidden row per candidate set required"));
    }
    let k = sets[0].k();
    if sets.iter().any(|s| s.k() != k) {
        return Err(Error::shape("candidates", "candidate sets differ in size"));
    }
    let ids: Vec<usize> = sets.iter().flat_map(|s| s.candidates.iter().copied()).collect();
    let cand = tape.gather_rows(embedding, &ids)?;
    let h = tape.gather_rows(hidden, row_of)?;
    let logits = tape.group_dot(cand, h, k)?;
    tape.log_softmax(logits, 1)
}

/// `softmax(Êmbᵀ h)` for a single position on plain vectors.
pub fn candidate_distribution(h: &[f64], rows: &[&[f64]]) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != h.len()) {
        return Err(Error::shape("candidate_distribution", "embedding width differs from hidden width"));
    }
    let logits: Vec<f64> = rows.iter().map(|r| r.iter().zip(h).map(|(a, b)| a * b).sum()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Multi-choice loss: mean negative log-probability of each set's label.
/// `labels[j]` is the expected label id for `sets[j]`; a mismatch means the
/// candidate construction broke its invariants.
pub fn mc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    sets: &[CandidateSet],
    labels: &[usize],
    sequences: usize,
    reduction: LossReduction,
) -> Result<Var> {
    if sets.len() != labels.len() {
        return Err(Error::shape("mc_loss", "one label per set required"));
    }
    if sets.is_empty() {
        return Ok(zero(tape));
    }
    for (s, &l) in sets.iter().zip(labels) {
        if s.target >= s.k() || s.candidates[s.target] != l {
            return Err(Error::Internal(format!(
                "label {l} is not the target of the candidate set at position {}",
                s.position
            )));
        }
    }
    let idx: Vec<(usize, usize)> = sets.iter().enumerate().map(|(j, s)| (j, s.target)).collect();
    let picked = tape.pick(log_probs, &idx)?;
    let neg = tape.scale(picked, -1.0)?;
    reduce(tape, neg, sets.len(), sequences, reduction)
}

/// `mlm + λ · task` on the tape.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, mlm: Var, task: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let t = tape.scale(task, lambda)?;
    tape.add(mlm, t)
}

/// Scalar loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm_loss: f64,
    pub task_loss: f64,
    pub combined: f64,
    pub masked: usize,
    pub replaced: usize,
    pub total: usize,
    /// Scored task positions (all content positions, or the sampled half).
    pub task_positions: usize,
    /// Batches in which no position was masked (MLM loss defined as 0).
    pub empty_mlm: usize,
}

impl LossBreakdown {
    pub fn combine(mlm_loss: f64, task_loss: f64, lambda: f64) -> f64 {
        mlm_loss + lambda * task_loss
    }
}
