//! Corruption, candidate construction and every training loss: masked-LM,
//! replaced-token detection (and its sampled and full-vocabulary variants),
//! and the multi-choice cloze loss with a `[NOTA]` reject option.

mod candidates;
mod losses;
mod sampling;

pub use candidates::{
    build_candidates, candidate_set, candidate_violation, leaky_candidates, sample_without_replacement,
    CandidateSet,
};
pub use losses::{
    candidate_distribution, candidate_log_probs, combined_loss, disc_loss, disc_prob, electra_complex_loss,
    mc_loss, mlm_loss, token_nll, LossBreakdown, LossReduction, PROB_FLOOR,
};
pub use sampling::{
    electra_sample_positions, replace, sample_restricted, CorruptedSequence, SampledPositions,
    TokenDistributions,
};

/// Default multi-choice loss weight.
pub const MC_BERT_LAMBDA: f64 = 20.0;
/// Default replaced-token-detection loss weight.
pub const ELECTRA_LAMBDA: f64 = 50.0;
/// Default number of candidates per position.
pub const DEFAULT_K: usize = 10;
