//! Joint pre-training of the auxiliary and main networks with Adam,
//! warmup/decay scheduling, FLOP accounting and fraction-of-budget
//! checkpoints.
//!
//! All randomness of step `s` comes from ChaCha8 streams keyed by
//! `(seed, s, purpose)`, and the data order is a seeded permutation per
//! epoch, so the parameters, optimizer moments and step counter fully
//! determine the rest of a run.

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod model;
pub mod optim;
pub mod run;
pub mod step;


use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use config::{CheckpointBasis, TrainConfig, Variant, ALL_VARIANTS, DEFAULT_FRACTIONS};
pub use flops::{encoder_flops_per_token, flops_estimate, flops_per_step};
pub use model::{bind_model, init_model, is_aux_leaf, parameter_count, Model};
pub use optim::{adam_step, adam_update, linear_schedule, lr_at, AdamConfig, OptimizerState};
pub use run::{checkpoint_name, run_pretraining, MetricsRecord, RunOptions, RunSummary};
pub use step::{joint_forward, JointOutput, Sampling, SequencePlan, StepStats};

use crate::autograd::{Scalar, Tape, Tensor};
use crate::data::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Independent random streams used within a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Order = 1,
    Mask = 2,
    Sample = 3,
    Dropout = 4,
    Init = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The rng for `(seed, index, purpose)`; `index` is the step (or the epoch
/// for [`Stream::Order`]).
pub fn stream_rng(seed: u64, index: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed) ^ splitmix(index.wrapping_add(0x5851_F42D)));
    rng.set_stream(purpose as u64);
    rng
}

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream_rng(seed, epoch, Stream::Order));
    p
}

pub fn vocab_hash(vocab: &Vocabulary) -> [u8; 32] {
    Sha256::digest(vocab.to_file_string().as_bytes()).into()
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Completed updates after this one.
    pub step: u64,
    pub lr: f64,
    pub flops: f64,
    pub grad_norm: f64,
    /// Non-pad tokens in the batch.
    pub tokens: usize,
    pub stats: StepStats,
}

/// Training state of one run.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub vocab_hash: [u8; 32],
    pub model: Model<Tensor<T>>,
    pub optimizer: OptimizerState<T>,
    pub step: u64,
    pub flops: f64,
    data: Vec<TokenSequence>,
    flops_per_step: f64,
    order: (u64, Vec<usize>),
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, vocab_size: usize, vocab_hash: [u8; 32], data: Vec<TokenSequence>) -> Result<Self> {
        let model = init_model(&config, vocab_size)?;
        let optimizer = OptimizerState::new(&model);
        Self::assemble(config, vocab_size, vocab_hash, data, model, optimizer, 0, 0.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        vocab_size: usize,
        vocab_hash: [u8; 32],
        data: Vec<TokenSequence>,
        model: Model<Tensor<T>>,
        optimizer: OptimizerState<T>,
        step: u64,
        flops: f64,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data".into()));
        }
        if let Some(s) = data.iter().find(|s| s.len() > config.max_seq_len) {
            return Err(Error::Length {
                len: s.len(),
                max: config.max_seq_len,
            });
        }
        if let Some(&id) = data.iter().flat_map(|s| s.ids()).find(|&&id| id >= vocab_size) {
            return Err(Error::Vocab { id, size: vocab_size });
        }
        let flops_per_step = flops_per_step(&config, vocab_size)?;
        let order = (0, epoch_permutation(config.seed, 0, data.len()));
        Ok(Trainer {
            config,
            vocab_size,
            vocab_hash,
            model,
            optimizer,
            step,
            flops,
            data,
            flops_per_step,
            order,
        })
    }

    /// Restores a run. The checkpoint must have been written under the same
    /// configuration and vocabulary.
    pub fn from_checkpoint(
        ck: &Checkpoint<T>,
        config: TrainConfig,
        vocab_hash: [u8; 32],
        data: Vec<TokenSequence>,
    ) -> Result<Self> {
        ck.verify_config(&config.hash())?;
        if ck.vocab_hash != vocab_hash {
            return Err(Error::Checkpoint("vocabulary differs from the one used for training".into()));
        }
        if ck.rng_seed != config.seed || ck.rng_step != ck.step {
            return Err(Error::Checkpoint("rng state inconsistent with configuration".into()));
        }
        let model = restore_model(&config, ck.vocab_size, &ck.params)?;
        let take = |blobs: &[(String, Tensor<T>)]| -> Result<Vec<Tensor<T>>> {
            let m = restore_model(&config, ck.vocab_size, blobs)?;
            Ok(m.leaves().into_iter().cloned().collect())
        };
        let optimizer = OptimizerState {
            step: ck.adam_step,
            m: take(&ck.adam_m)?,
            v: take(&ck.adam_v)?,
        };
        Self::assemble(config, ck.vocab_size, vocab_hash, data, model, optimizer, ck.step, ck.flops)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let named = |leaves: &[Tensor<T>]| -> Vec<(String, Tensor<T>)> {
            self.model
                .named()
                .into_iter()
                .map(|(n, _)| n)
                .zip(leaves.iter().cloned())
                .collect()
        };
        Checkpoint {
            config_hash: self.config.hash(),
            vocab_hash: self.vocab_hash,
            config_text: self.config.to_kv(),
            vocab_size: self.vocab_size,
            step: self.step,
            flops: self.flops,
            rng_seed: self.config.seed,
            rng_step: self.step,
            params: self.model.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            adam_step: self.optimizer.step,
            adam_m: named(&self.optimizer.m),
            adam_v: named(&self.optimizer.v),
        }
    }

    pub fn data(&self) -> &[TokenSequence] {
        &self.data
    }

    pub fn flops_per_step(&self) -> f64 {
        self.flops_per_step
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Dataset indices of the batch for `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|g| {
                let epoch = g / n;
                if self.order.0 != epoch {
                    self.order = (epoch, epoch_permutation(self.config.seed, epoch, n as usize));
                }
                self.order.1[(g % n) as usize]
            })
            .collect()
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let cfg = &self.config;
        let seed = cfg.seed;
        let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &self.data[i]).collect();
        let tokens = seqs.iter().map(|s| s.len()).sum();
        let mut tape = Tape::new();
        let vars = bind_model(&mut tape, &self.model);
        let (mut mask_rng, mut sample_rng, mut drop_rng) = (
            stream_rng(seed, step, Stream::Mask),
            stream_rng(seed, step, Stream::Sample),
            stream_rng(seed, step, Stream::Dropout),
        );
        let sampling = Sampling::Draw {
            mask: &mut mask_rng,
            sample: &mut sample_rng,
        };
        let out = joint_forward(&mut tape, &vars, cfg, &seqs, sampling, Some(&mut drop_rng))?;
        let loss = out.stats.losses.combined;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} (mlm {}, task {})",
                step + 1,
                out.stats.losses.mlm_loss,
                out.stats.losses.task_loss
            )));
        }
        tape.backward(out.loss)?;
        let grads: Vec<Option<Vec<T>>> = vars
            .leaves()
            .iter()
            .map(|&&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        drop(tape);
        let grad_norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let lr = lr_at(step + 1, &self.config);
        adam_step(
            &mut self.model,
            &grads,
            &mut self.optimizer,
            lr,
            &AdamConfig::from_train(&self.config),
        )?;
        self.step += 1;
        self.flops += self.flops_per_step;
        Ok(StepRecord {
            step: self.step,
            lr,
            flops: self.flops,
            grad_norm,
            tokens,
            stats: out.stats,
        })
    }
}

/// Rebuilds a model of `config`'s structure from named blobs, checking
/// names and shapes.
pub fn restore_model<T: Scalar>(
    config: &TrainConfig,
    vocab_size: usize,
    blobs: &[(String, Tensor<T>)],
) -> Result<Model<Tensor<T>>> {
    let shapes = Model::shapes(config, vocab_size)?;
    let expected = shapes.named();
    if expected.len() != blobs.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            blobs.len()
        )));
    }
    for ((name, shape), (bn, bt)) in expected.iter().zip(blobs) {
        if name != bn || shape.as_slice() != bt.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{bn}` {:?} does not match expected `{name}` {:?}",
                bt.shape(),
                shape
            )));
        }
    }
    let leaves: Vec<Tensor<T>> = blobs.iter().map(|(_, t)| t.clone()).collect();
    Ok(shapes.rebuild(&leaves))
}

/// Steps at which each checkpoint fraction is first reached. With a
/// constant per-step cost the FLOP and step bases agree; both are computed
/// from their own totals.
pub fn checkpoint_steps(cfg: &TrainConfig, flops_per_step: f64) -> Vec<(f64, u64)> {
    let total = cfg.total_steps;
    cfg.checkpoint_fractions
        .iter()
        .map(|&f| {
            let step = match cfg.checkpoint_basis {
                CheckpointBasis::Steps => first_reaching(total, |s| s as f64 >= f * total as f64),
                CheckpointBasis::Flops => {
                    let budget = flops_per_step * total as f64;
                    first_reaching(total, |s| s as f64 * flops_per_step >= f * budget * (1.0 - 1e-12))
                }
            };
            (f, step)
        })
        .collect()
}

fn first_reaching(total: u64, reached: impl Fn(u64) -> bool) -> u64 {
    let (mut lo, mut hi) = (1, total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if reached(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}
