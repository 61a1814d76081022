use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one transformer encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub embed_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Zero layers is allowed (the encoder is then an embedding lookup);
    /// every other extent must be positive.
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("embed_size", self.embed_size),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_heads * self.head_size != self.hidden_size {
            return Err(Error::Config(format!(
                "num_heads ({}) x head_size ({}) != hidden_size ({})",
                self.num_heads, self.head_size, self.hidden_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn with_vocab(mut self, vocab_size: usize, max_seq_len: usize) -> Self {
        self.vocab_size = vocab_size;
        self.max_seq_len = max_seq_len;
        self
    }
}

/// Named size presets. `tiny-*` are the desk-scale shapes; `paper-*` are the
/// full-size base shapes kept for reference and FLOPs accounting.
///
/// Vocabulary size and maximum length are placeholders (32768 / 512 for the
/// full-size presets, 64 / 128 for tiny ones); set them with
/// [`EncoderConfig::with_vocab`].
pub fn desk_scale_config(preset: &str) -> Result<EncoderConfig> {
    let (num_layers, hidden_size, ffn_size, num_heads, head_size, embed_size, vocab_size, max_seq_len) =
        match preset {
            "tiny-encoder" => (2, 128, 512, 4, 32, 128, 64, 128),
            "tiny-controller" => (2, 64, 256, 2, 32, 128, 64, 128),
            "paper-encoder" => (12, 768, 3072, 12, 64, 768, 32768, 512),
            "paper-controller" => (12, 256, 1024, 4, 64, 768, 32768, 512),
            other => return Err(Error::Config(format!("unknown encoder preset `{other}`"))),
        };
    Ok(EncoderConfig {
        num_layers,
        hidden_size,
        ffn_size,
        num_heads,
        head_size,
        embed_size,
        max_seq_len,
        vocab_size,
        dropout_rate: 0.1,
    })
}
