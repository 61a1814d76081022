use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MaskScheme, VocabMode};
use crate::encoder::{desk_scale_config, EncoderConfig};
use crate::error::{Error, Result};
use crate::objectives::{LossReduction, DEFAULT_K, ELECTRA_LAMBDA, MC_BERT_LAMBDA};

/// Pre-training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Masked LM only.
    Roberta,
    /// Small MLM generator plus replaced-token discriminator on all positions.
    Electra,
    /// Discriminator scored on all masked positions plus sampled unmasked ones (half of the input).
    ElectraSample,
    /// Discriminator replaced by a full-vocabulary reconstruction head.
    ElectraComplex,
    /// Meta controller plus multi-choice cloze generator with `[NOTA]`.
    McBert,
    /// Multi-choice cloze that always offers the original token and no `[NOTA]`.
    McBertLeaky,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Roberta,
    Variant::Electra,
    Variant::ElectraSample,
    Variant::ElectraComplex,
    Variant::McBert,
    Variant::McBertLeaky,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Roberta => "roberta",
            Variant::Electra => "electra",
            Variant::ElectraSample => "electra-sample",
            Variant::ElectraComplex => "electra-complex",
            Variant::McBert => "mc-bert",
            Variant::McBertLeaky => "mc-bert-leaky",
        }
    }

    pub fn is_electra(self) -> bool {
        matches!(self, Variant::Electra | Variant::ElectraSample | Variant::ElectraComplex)
    }

    pub fn is_mc(self) -> bool {
        matches!(self, Variant::McBert | Variant::McBertLeaky)
    }

    /// Whether a second (auxiliary) network corrupts the input.
    pub fn has_aux(self) -> bool {
        self != Variant::Roberta
    }

    pub fn default_lambda(self) -> f64 {
        if self.is_mc() {
            MC_BERT_LAMBDA
        } else {
            ELECTRA_LAMBDA
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// What the checkpoint fractions are fractions of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointBasis {
    Flops,
    Steps,
}

impl fmt::Display for CheckpointBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointBasis::Flops => "flops",
            CheckpointBasis::Steps => "steps",
        })
    }
}

impl FromStr for CheckpointBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" => Ok(CheckpointBasis::Flops),
            "steps" => Ok(CheckpointBasis::Steps),
            other => Err(Error::Config(format!("unknown checkpoint basis `{other}`"))),
        }
    }
}

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.04, 0.08, 0.16, 0.32, 0.64, 1.0];

/// Everything that determines a pre-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub k: usize,
    pub mask_prob: f64,
    pub mask_scheme: MaskScheme,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_fractions: Vec<f64>,
    pub checkpoint_basis: CheckpointBasis,
    pub dropout: f64,
    pub loss_reduction: LossReduction,
    pub share_embeddings: bool,
    pub main_preset: String,
    pub aux_preset: String,
    pub max_seq_len: usize,
    pub vocab_mode: VocabMode,
    pub vocab_size: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Variant::McBert)
    }
}

impl TrainConfig {
    /// Desk-scale defaults for `variant`.
    pub fn desk(variant: Variant) -> Self {
        TrainConfig {
            variant,
            lambda: variant.default_lambda(),
            k: DEFAULT_K,
            mask_prob: 0.15,
            mask_scheme: MaskScheme::PureMask,
            batch_size: 32,
            total_steps: 5000,
            warmup_steps: 100,
            peak_lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_fractions: DEFAULT_FRACTIONS.to_vec(),
            checkpoint_basis: CheckpointBasis::Flops,
            dropout: 0.1,
            loss_reduction: LossReduction::Mean,
            share_embeddings: true,
            main_preset: "tiny-encoder".into(),
            aux_preset: "tiny-controller".into(),
            max_seq_len: 64,
            vocab_mode: VocabMode::Char,
            vocab_size: 256,
            log_every: 50,
        }
    }

    /// Full-size pre-training hyperparameters.
    pub fn paper(variant: Variant) -> Self {
        TrainConfig {
            batch_size: 256,
            total_steps: 1_000_000,
            warmup_steps: 10_000,
            peak_lr: 1e-4,
            main_preset: "paper-encoder".into(),
            aux_preset: "paper-controller".into(),
            max_seq_len: 512,
            vocab_mode: VocabMode::MiniBpe,
            vocab_size: 32768,
            log_every: 1000,
            ..Self::desk(variant)
        }
    }

    /// Named scale preset: `desk` or `paper`.
    pub fn preset(scale: &str, variant: Variant) -> Result<Self> {
        match scale {
            "desk" => Ok(Self::desk(variant)),
            "paper" => Ok(Self::paper(variant)),
            other => Err(Error::Config(format!("unknown scale preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.variant.is_mc() && self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.variant.has_aux() && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad(format!("mask_prob must lie in (0, 1), got {}", self.mask_prob));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let f = &self.checkpoint_fractions;
        if f.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoint_fractions must be strictly increasing within (0, 1]".into());
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        desk_scale_config(&self.main_preset)?;
        if self.variant.has_aux() {
            desk_scale_config(&self.aux_preset)?;
        }
        Ok(())
    }

    /// Encoder shapes for a vocabulary of `vocab_size` ids.
    pub fn main_encoder(&self, vocab_size: usize) -> Result<EncoderConfig> {
        self.encoder(&self.main_preset, vocab_size)
    }

    pub fn aux_encoder(&self, vocab_size: usize) -> Result<EncoderConfig> {
        self.encoder(&self.aux_preset, vocab_size)
    }

    fn encoder(&self, preset: &str, vocab_size: usize) -> Result<EncoderConfig> {
        let mut c = desk_scale_config(preset)?.with_vocab(vocab_size, self.max_seq_len);
        c.dropout_rate = self.dropout;
        c.validate()?;
        Ok(c)
    }

    pub const KEYS: [&'static str; 25] = [
        "variant",
        "lambda",
        "k",
        "mask_prob",
        "mask_scheme",
        "batch_size",
        "total_steps",
        "warmup_steps",
        "peak_lr",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "seed",
        "checkpoint_fractions",
        "checkpoint_basis",
        "dropout",
        "loss_reduction",
        "share_embeddings",
        "main_preset",
        "aux_preset",
        "max_seq_len",
        "vocab_mode",
        "vocab_size",
        "log_every",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "lambda" => self.lambda = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "mask_prob" => self.mask_prob = parse(key, v)?,
            "mask_scheme" => self.mask_scheme = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_fractions" => {
                self.checkpoint_fractions = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "checkpoint_basis" => self.checkpoint_basis = v.parse()?,
            "dropout" => self.dropout = parse(key, v)?,
            "loss_reduction" => self.loss_reduction = v.parse()?,
            "share_embeddings" => self.share_embeddings = parse(key, v)?,
            "main_preset" => self.main_preset = v.to_string(),
            "aux_preset" => self.aux_preset = v.to_string(),
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "vocab_mode" => self.vocab_mode = v.parse()?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "variant" => self.variant.to_string(),
            "lambda" => self.lambda.to_string(),
            "k" => self.k.to_string(),
            "mask_prob" => self.mask_prob.to_string(),
            "mask_scheme" => self.mask_scheme.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "peak_lr" => self.peak_lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_fractions" => self
                .checkpoint_fractions
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "checkpoint_basis" => self.checkpoint_basis.to_string(),
            "dropout" => self.dropout.to_string(),
            "loss_reduction" => self.loss_reduction.to_string(),
            "share_embeddings" => self.share_embeddings.to_string(),
            "main_preset" => self.main_preset.clone(),
            "aux_preset" => self.aux_preset.clone(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "vocab_mode" => self.vocab_mode.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    /// Canonical `key=value` text, one line per key in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            s.push_str(key);
            s.push('=');
            s.push_str(&self.get(key).expect("every key has a value"));
            s.push('\n');
        }
        s
    }

    /// Parses `key=value` lines over `self`. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }
}
