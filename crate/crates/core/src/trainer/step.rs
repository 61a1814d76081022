use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::model::Model;
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::data::{mask, MaskedSequence, TokenSequence, NOTA};
use crate::encoder::{Dropout, TokenBatch};
use crate::error::{Error, Result};
use crate::objectives::{
    build_candidates, candidate_log_probs, combined_loss, disc_loss, electra_complex_loss, electra_sample_positions,
    leaky_candidates, mc_loss, mlm_loss, replace, CandidateSet, CorruptedSequence, LossBreakdown, TokenDistributions,
};

/// Everything sampled for one sequence during a step. Holding a plan fixed
/// makes the loss a deterministic, differentiable function of the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub masked: MaskedSequence,
    /// `x^R` (variants with an auxiliary network).
    pub corrupted: Option<CorruptedSequence>,
    /// Candidate sets at every content position (multi-choice variants).
    pub candidates: Vec<CandidateSet>,
    /// Positions scored by the task loss.
    pub scored: Vec<usize>,
    /// ELECTRA-sample: masked positions alone exceeded half the input.
    pub flagged: bool,
}

/// Where the stochastic parts of a step come from.
pub enum Sampling<'a> {
    Draw {
        mask: &'a mut ChaCha8Rng,
        sample: &'a mut ChaCha8Rng,
    },
    Fixed(&'a [SequencePlan]),
}

/// Loss values and accuracy counts of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Masked positions where the MLM head's argmax is the original token.
    pub mlm_correct: usize,
    /// Task accuracy at replaced / unreplaced scored positions.
    pub replaced_correct: usize,
    pub replaced_scored: usize,
    pub kept_correct: usize,
    pub kept_scored: usize,
    pub flagged: usize,
}

impl StepStats {
    pub fn mlm_accuracy(&self) -> f64 {
        ratio(self.mlm_correct, self.losses.masked)
    }

    pub fn replaced_accuracy(&self) -> f64 {
        ratio(self.replaced_correct, self.replaced_scored)
    }

    pub fn kept_accuracy(&self) -> f64 {
        ratio(self.kept_correct, self.kept_scored)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub struct JointOutput {
    pub loss: Var,
    pub mlm: Var,
    pub task: Option<Var>,
    pub plans: Vec<SequencePlan>,
    pub stats: StepStats,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn dropout<'a>(cfg: &TrainConfig, rng: &'a mut Option<&mut ChaCha8Rng>) -> Option<Dropout<'a>> {
    match rng {
        Some(r) if cfg.dropout > 0.0 => Some(Dropout {
            rate: cfg.dropout,
            rng: r,
        }),
        _ => None,
    }
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// One forward pass of the variant's objective over `seqs`, building the
/// combined loss on `tape`. Sampling reads controller probabilities as plain
/// values, so no gradient crosses it.
pub fn joint_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<Var>,
    cfg: &TrainConfig,
    seqs: &[&TokenSequence],
    mut sampling: Sampling<'_>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<JointOutput> {
    if seqs.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if model.variant != cfg.variant {
        return Err(Error::Config(format!(
            "model built for {} but config asks for {}",
            model.variant, cfg.variant
        )));
    }
    let variant = cfg.variant;
    let vocab = model.main.config.vocab_size;
    let b = seqs.len();
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let emb = model.embedding;
    let red = cfg.loss_reduction;

    let mut plans: Vec<SequencePlan> = match &mut sampling {
        Sampling::Draw { mask: rng, .. } => seqs
            .iter()
            .map(|x| {
                Ok(SequencePlan {
                    masked: mask(x, cfg.mask_prob, &mut **rng, cfg.mask_scheme, vocab)?,
                    corrupted: None,
                    candidates: Vec::new(),
                    scored: Vec::new(),
                    flagged: false,
                })
            })
            .collect::<Result<_>>()?,
        Sampling::Fixed(p) => {
            if p.len() != b || p.iter().zip(seqs).any(|(p, x)| p.masked.len() != x.len()) {
                return Err(Error::shape("joint_forward", "plan does not match the batch"));
            }
            p.to_vec()
        }
    };
    let content: Vec<Vec<usize>> = seqs.iter().map(|x| x.content_positions().collect()).collect();
    let masked_ids: Vec<&[usize]> = plans.iter().map(|p| p.masked.ids.as_slice()).collect();
    let xm = TokenBatch::pad(&masked_ids)?;

    let mut stats = StepStats::default();
    stats.losses.total = content.iter().map(|c| c.len()).sum();
    stats.losses.masked = plans.iter().map(|p| p.masked.masked_positions.len()).sum();

    // Masked-LM part: the main network itself (roberta) or the auxiliary one.
    let (enc, head, head_emb) = if variant == Variant::Roberta {
        let head = model.mlm_head.as_ref().ok_or_else(|| Error::Internal("missing mlm head".into()))?;
        (&model.main, head, emb)
    } else {
        let aux = model.aux.as_ref().ok_or_else(|| Error::Internal("missing auxiliary network".into()))?;
        let head = model.aux_head.as_ref().ok_or_else(|| Error::Internal("missing auxiliary head".into()))?;
        (aux, head, aux.token_embedding.unwrap_or(emb))
    };
    let h = enc.forward(tape, &xm, Some(emb), dropout(cfg, &mut dropout_rng))?;
    // Rows the head is evaluated on: every content position when the
    // multi-choice construction needs full distributions, else masked ones.
    let head_pos: Vec<(usize, usize)> = (0..b)
        .flat_map(|s| {
            let rows: Vec<usize> = if variant.is_mc() {
                content[s].clone()
            } else {
                plans[s].masked.masked_positions.clone()
            };
            rows.into_iter().map(move |i| (s, i))
        })
        .collect();
    let mut mlm_targets = Vec::new();
    for (j, &(s, i)) in head_pos.iter().enumerate() {
        if plans[s].masked.is_masked(i) {
            mlm_targets.push((j, seqs[s].ids()[i]));
        }
    }
    let mut probs: Option<TokenDistributions> = None;
    let mlm = if head_pos.is_empty() {
        stats.losses.empty_mlm = 1;
        zero(tape)
    } else {
        let rows: Vec<usize> = head_pos.iter().map(|&(s, i)| s * len + i).collect();
        let hr = tape.gather_rows(h, &rows)?;
        let logits = head.logits(tape, hr, head_emb)?;
        let lv = tape.value(logits);
        for &(j, t) in &mlm_targets {
            stats.mlm_correct += usize::from(argmax(lv.row(j)) == t);
        }
        if variant.has_aux() && matches!(sampling, Sampling::Draw { .. }) {
            probs = Some(TokenDistributions::from_logits(vocab, lv.data())?);
        }
        let (loss, empty) = mlm_loss(tape, logits, &mlm_targets, b, red)?;
        stats.losses.empty_mlm = usize::from(empty);
        loss
    };
    stats.losses.mlm_loss = tape.value(mlm).item().as_f64();

    if variant == Variant::Roberta {
        stats.losses.combined = stats.losses.mlm_loss;
        return Ok(JointOutput {
            loss: mlm,
            mlm,
            task: None,
            plans,
            stats,
        });
    }

    if let Sampling::Draw { sample: rng, .. } = &mut sampling {
        let mut next_row = 0;
        for (s, x) in seqs.iter().enumerate() {
            let n = x.len();
            let mut rows = vec![1.0 / vocab as f64; n * vocab];
            for &(ps, i) in &head_pos[next_row..] {
                if ps != s {
                    break;
                }
                let src = probs.as_ref().expect("distributions computed").row(next_row);
                rows[i * vocab..(i + 1) * vocab].copy_from_slice(src);
                next_row += 1;
            }
            let dist = TokenDistributions::new(vocab, rows)?;
            let plan = &mut plans[s];
            let xr = replace(x, &plan.masked, &dist, &mut **rng)?;
            match variant {
                Variant::McBert => {
                    plan.candidates = build_candidates(x, &xr, &dist, cfg.k, &content[s], &mut **rng)?;
                    plan.scored = content[s].clone();
                }
                Variant::McBertLeaky => {
                    plan.candidates = leaky_candidates(x, &xr, &dist, cfg.k, &content[s], &mut **rng)?;
                    plan.scored = content[s].clone();
                }
                Variant::ElectraSample => {
                    let sp = electra_sample_positions(&content[s], &plan.masked.masked_positions, &mut **rng);
                    plan.scored = sp.positions;
                    plan.flagged = sp.flagged;
                }
                _ => plan.scored = content[s].clone(),
            }
            plan.corrupted = Some(xr);
        }
    }

    let corrupted: Vec<&CorruptedSequence> = plans
        .iter()
        .map(|p| p.corrupted.as_ref().ok_or_else(|| Error::Internal("plan lacks x^R".into())))
        .collect::<Result<_>>()?;
    stats.losses.replaced = corrupted.iter().map(|c| c.replaced_count()).sum();
    stats.flagged = plans.iter().filter(|p| p.flagged).count();
    let xr_ids: Vec<&[usize]> = corrupted.iter().map(|c| c.ids.as_slice()).collect();
    let xr = TokenBatch::pad(&xr_ids)?;
    let h = model.main.forward(tape, &xr, Some(emb), dropout(cfg, &mut dropout_rng))?;

    let scored: Vec<(usize, usize)> = plans
        .iter()
        .enumerate()
        .flat_map(|(s, p)| p.scored.iter().map(move |&i| (s, i)))
        .collect();
    stats.losses.task_positions = scored.len();
    let rows: Vec<usize> = scored.iter().map(|&(s, i)| s * len + i).collect();
    let replaced: Vec<bool> = scored.iter().map(|&(s, i)| corrupted[s].replaced[i]).collect();
    let tally = |stats: &mut StepStats, j: usize, correct: bool| {
        if replaced[j] {
            stats.replaced_scored += 1;
            stats.replaced_correct += usize::from(correct);
        } else {
            stats.kept_scored += 1;
            stats.kept_correct += usize::from(correct);
        }
    };

    let task = if rows.is_empty() {
        zero(tape)
    } else {
        let hr = tape.gather_rows(h, &rows)?;
        match variant {
            Variant::Electra | Variant::ElectraSample => {
                let disc = model.disc_head.as_ref().ok_or_else(|| Error::Internal("missing disc head".into()))?;
                let p = disc.probs(tape, hr)?;
                for (j, v) in tape.value(p).data().iter().enumerate() {
                    tally(&mut stats, j, (v.as_f64() < 0.5) == replaced[j]);
                }
                let idx: Vec<usize> = (0..rows.len()).collect();
                disc_loss(tape, p, &idx, &replaced, b, red)?
            }
            Variant::ElectraComplex => {
                let head = model.mlm_head.as_ref().ok_or_else(|| Error::Internal("missing mlm head".into()))?;
                let logits = head.logits(tape, hr, emb)?;
                let targets: Vec<(usize, usize)> =
                    scored.iter().enumerate().map(|(j, &(s, i))| (j, seqs[s].ids()[i])).collect();
                let lv = tape.value(logits);
                for &(j, t) in &targets {
                    tally(&mut stats, j, argmax(lv.row(j)) == t);
                }
                electra_complex_loss(tape, logits, &targets, b, red)?
            }
            Variant::McBert | Variant::McBertLeaky => {
                let hr = match &model.mc_proj {
                    Some(p) => p.apply(tape, hr)?,
                    None => hr,
                };
                let sets: Vec<CandidateSet> = plans.iter().flat_map(|p| p.candidates.iter().cloned()).collect();
                if sets.len() != scored.len() || sets.iter().zip(&scored).any(|(c, &(_, i))| c.position != i) {
                    return Err(Error::Internal("candidate sets do not line up with scored positions".into()));
                }
                let labels: Vec<usize> = scored
                    .iter()
                    .map(|&(s, i)| {
                        if variant == Variant::McBertLeaky || corrupted[s].replaced[i] {
                            seqs[s].ids()[i]
                        } else {
                            NOTA
                        }
                    })
                    .collect();
                let idx: Vec<usize> = (0..rows.len()).collect();
                let lp = candidate_log_probs(tape, hr, emb, &sets, &idx)?;
                let lv = tape.value(lp);
                for (j, set) in sets.iter().enumerate() {
                    tally(&mut stats, j, argmax(lv.row(j)) == set.target);
                }
                mc_loss(tape, lp, &sets, &labels, b, red)?
            }
            Variant::Roberta => unreachable!("handled above"),
        }
    };
    stats.losses.task_loss = tape.value(task).item().as_f64();
    let loss = combined_loss(tape, mlm, task, cfg.lambda)?;
    stats.losses.combined = tape.value(loss).item().as_f64();
    Ok(JointOutput {
        loss,
        mlm,
        task: Some(task),
        plans,
        stats,
    })
}
