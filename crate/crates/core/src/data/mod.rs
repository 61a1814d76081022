//! Corpus handling: vocabulary, sentence packing, masking and the synthetic
//! grammar used for desk-scale corpora and probe tasks.

pub mod grammar;
mod mask;
mod pack;
mod vocab;

pub use mask::{mask, MaskScheme, MaskedSequence};
pub use pack::{pack_sequences, split_sentences, tokenize_corpus};
pub use vocab::{
    is_structural, is_unsamplable, VocabMode, Vocabulary, CLS, MASK, NOTA, NUM_SPECIALS, PAD, SEP,
    SPECIAL_TOKENS, UNK,
};

use crate::error::{Error, Result};

/// An uncorrupted input sequence `x`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if let Some(pos) = ids.iter().position(|&id| id == MASK || id == NOTA) {
            return Err(Error::Config(format!(
                "token sequence holds reserved id {} at position {pos}",
                ids[pos]
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that may be masked or scored (everything but `[CLS]`, `[SEP]`, `[PAD]`).
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !is_structural(id))
            .map(|(i, _)| i)
    }
}
