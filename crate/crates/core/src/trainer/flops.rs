//! Analytic FLOP counts. A multiply-add is two FLOPs; the backward pass is
//! counted as twice the forward, so training costs three forward passes.
//!
//! Forward FLOPs per token of an encoder with hidden `H`, FFN `F`,
//! embedding `E` and sequence length `L`:
//!
//! ```text
//! layers × (8H² + 4LH + 4HF)  +  2EH (only when E ≠ H)
//! ```
//!
//! (`8H²` for the four `H × H` projections, `4LH` for scores and context,
//! `4HF` for the two FFN matrices.) Heads add, per token they are applied
//! to: `2HE + 2EV` for a tied full-vocabulary head, `2H` for the
//! discriminator, `2kE` (+ `2HE` projection) for candidate scoring.
//! Masked-only heads are charged at the expected fraction `p` of tokens.
//! Token count per step is `batch × max_seq_len`.

use super::config::{TrainConfig, Variant};
use crate::encoder::EncoderConfig;
use crate::error::Result;

/// Forward FLOPs per token of the encoder body.
pub fn encoder_flops_per_token(cfg: &EncoderConfig, seq_len: usize) -> f64 {
    let (h, f, e, l) = (
        cfg.hidden_size as f64,
        cfg.ffn_size as f64,
        cfg.embed_size as f64,
        seq_len as f64,
    );
    let layer = 8.0 * h * h + 4.0 * l * h + 4.0 * h * f;
    let proj = if cfg.embed_size != cfg.hidden_size { 2.0 * e * h } else { 0.0 };
    cfg.num_layers as f64 * layer + proj
}

fn mlm_head_flops(cfg: &EncoderConfig) -> f64 {
    let (h, e, v) = (cfg.hidden_size as f64, cfg.embed_size as f64, cfg.vocab_size as f64);
    2.0 * h * e + 2.0 * e * v
}

/// Training FLOPs (forward + backward) of one step.
pub fn flops_per_step(cfg: &TrainConfig, vocab_size: usize) -> Result<f64> {
    let tokens = (cfg.batch_size * cfg.max_seq_len) as f64;
    let l = cfg.max_seq_len;
    let main = cfg.main_encoder(vocab_size)?;
    let (h, e) = (main.hidden_size as f64, main.embed_size as f64);
    let p = cfg.mask_prob;
    let mut per_token = encoder_flops_per_token(&main, l);
    per_token += match cfg.variant {
        Variant::Roberta => p * mlm_head_flops(&main),
        Variant::Electra | Variant::ElectraSample => 2.0 * h,
        Variant::ElectraComplex => mlm_head_flops(&main),
        Variant::McBert | Variant::McBertLeaky => {
            2.0 * cfg.k as f64 * e + if main.hidden_size != main.embed_size { 2.0 * h * e } else { 0.0 }
        }
    };
    if cfg.variant.has_aux() {
        let aux = cfg.aux_encoder(vocab_size)?;
        per_token += encoder_flops_per_token(&aux, l);
        let share = if cfg.variant.is_mc() { 1.0 } else { p };
        per_token += share * mlm_head_flops(&aux);
    }
    Ok(3.0 * per_token * tokens)
}

pub fn flops_estimate(cfg: &TrainConfig, vocab_size: usize, steps: u64) -> Result<f64> {
    Ok(flops_per_step(cfg, vocab_size)? * steps as f64)
}
