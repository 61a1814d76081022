use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const NOTA: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const UNK: usize = 5;
pub const NUM_SPECIALS: usize = 6;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[MASK]", "[NOTA]", "[CLS]", "[SEP]", "[UNK]"];

/// Ids that must never be sampled as a replacement or negative candidate.
#[inline]
pub fn is_unsamplable(id: usize) -> bool {
    id <= SEP
}

/// Sequence scaffolding that masking and the per-position losses skip.
#[inline]
pub fn is_structural(id: usize) -> bool {
    id == PAD || id == CLS || id == SEP
}

/// How raw text is split into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    Char,
    Word,
    MiniBpe,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabMode::Char => "char",
            VocabMode::Word => "word",
            VocabMode::MiniBpe => "mini-bpe",
        })
    }
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(VocabMode::Char),
            "word" | "whitespace-word" => Ok(VocabMode::Word),
            "mini-bpe" | "bpe" => Ok(VocabMode::MiniBpe),
            other => Err(Error::Config(format!("unknown vocabulary mode `{other}`"))),
        }
    }
}

/// Bijective token ↔ id map with the six specials at fixed ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: VocabMode,
    max_token_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from documents.
    ///
    /// Char and word modes rank tokens by frequency (ties lexicographic). BPE
    /// mode lists the frequency-ranked alphabet followed by merges in the
    /// order they were learned.
    pub fn build(corpus: &[String], max_size: usize, mode: VocabMode) -> Result<Self> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the {NUM_SPECIALS} specials"
            )));
        }
        let budget = max_size - NUM_SPECIALS;
        let learned = match mode {
            VocabMode::Char => {
                let mut counts: HashMap<String, usize> = HashMap::new();
                for doc in corpus {
                    for ch in doc.chars() {
                        *counts.entry(ch.to_string()).or_default() += 1;
                    }
                }
                rank(counts, budget)
            }
            VocabMode::Word => {
                let mut counts: HashMap<String, usize> = HashMap::new();
                for doc in corpus {
                    for w in doc.split_whitespace() {
                        if !SPECIAL_TOKENS.contains(&w) {
                            *counts.entry(w.to_string()).or_default() += 1;
                        }
                    }
                }
                rank(counts, budget)
            }
            VocabMode::MiniBpe => learn_bpe(corpus, budget),
        };
        if learned.is_empty() {
            return Err(Error::Empty("corpus contains no tokens".into()));
        }
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(learned)
            .collect();
        Self::from_tokens(tokens, mode)
    }

    /// Wraps an explicit token list; the first six entries must be the specials.
    pub fn from_tokens(tokens: Vec<String>, mode: VocabMode) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.contains('\n') {
                return Err(Error::Config(format!("token {i} contains a newline")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        let max_token_chars = tokens[NUM_SPECIALS..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocabulary {
            tokens,
            index,
            mode,
            max_token_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Tokenizes text. Specials are never produced except `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let lookup = |t: &str| match self.index.get(t) {
            Some(&id) if id >= NUM_SPECIALS => id,
            _ => UNK,
        };
        match self.mode {
            VocabMode::Char => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| lookup(c.encode_utf8(&mut buf))).collect()
            }
            VocabMode::Word => text.split_whitespace().map(lookup).collect(),
            VocabMode::MiniBpe => {
                let space = self.id(" ").filter(|&id| id >= NUM_SPECIALS);
                let mut out = Vec::new();
                for (wi, word) in text.split_whitespace().enumerate() {
                    if wi > 0 {
                        if let Some(s) = space {
                            out.push(s);
                        }
                    }
                    self.encode_word_longest_match(word, &mut out);
                }
                out
            }
        }
    }

    fn encode_word_longest_match(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let mut matched = None;
            let longest = self.max_token_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let start = chars[i].0;
                let end = chars.get(i + len).map_or(word.len(), |c| c.0);
                if let Some(&id) = self.index.get(&word[start..end]) {
                    if id >= NUM_SPECIALS {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = if self.mode == VocabMode::Word { " " } else { "" };
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(sep)
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str, mode: VocabMode) -> Result<Self> {
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| Error::Config("vocabulary file must end with a newline".into()))?;
        Self::from_tokens(body.split('\n').map(str::to_string).collect(), mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path, mode: VocabMode) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?, mode)
    }
}

fn rank(counts: HashMap<String, usize>, budget: usize) -> Vec<String> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(budget).map(|(t, _)| t).collect()
}

/// Byte-pair merges over whitespace-separated words. The space character is
/// part of the alphabet so that word boundaries survive tokenization.
fn learn_bpe(corpus: &[String], budget: usize) -> Vec<String> {
    let mut word_freq: HashMap<&str, usize> = HashMap::new();
    let mut alphabet: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        let mut words = 0;
        for w in doc.split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
            for ch in w.chars() {
                *alphabet.entry(ch.to_string()).or_default() += 1;
            }
            words += 1;
        }
        if words > 1 {
            *alphabet.entry(" ".to_string()).or_default() += words - 1;
        }
    }
    let mut vocab = rank(alphabet, budget);
    let known: std::collections::HashSet<String> = vocab.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| {
            let symbols = w.chars().map(|c| c.to_string()).filter(|s| known.contains(s)).collect();
            (symbols, f)
        })
        .collect();
    words.sort();

    while vocab.len() < budget {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, f) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (symbols, _) in &mut words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        if !vocab.contains(&merged) {
            vocab.push(merged);
        }
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(s: &str) -> Vec<String> {
        vec![s.to_string()]
    }

    #[test]
    fn char_vocab_of_aab() {
        let v = Vocabulary::build(&corpus("aab"), 100, VocabMode::Char).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("b"));
        assert_eq!(&v.tokens()[..NUM_SPECIALS], &SPECIAL_TOKENS);
    }

    #[test]
    fn too_small_max_size_is_rejected() {
        assert!(matches!(
            Vocabulary::build(&corpus("aab"), NUM_SPECIALS, VocabMode::Char),
            Err(Error::Config(_))
        ));
        assert!(Vocabulary::build(&corpus("aab"), NUM_SPECIALS + 1, VocabMode::Char).is_ok());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            Vocabulary::build(&corpus(""), 50, VocabMode::Word),
            Err(Error::Empty(_))
        ));
        assert!(Vocabulary::build(&[], 50, VocabMode::Char).is_err());
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build(&corpus("b a c a"), 100, VocabMode::Word).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &["a", "b", "c"]);
    }

    #[test]
    fn bpe_merges_ab_first_on_ababab() {
        // pairs in "ababab": (a,b) x3, (b,a) x2 → first merge is "ab"
        let v = Vocabulary::build(&corpus("ababab"), 100, VocabMode::MiniBpe).unwrap();
        let learned = &v.tokens()[NUM_SPECIALS..];
        assert_eq!(&learned[..2], &["a", "b"]);
        assert_eq!(learned[2], "ab");
        // then "ab ab ab" → (ab,ab) x2 → "abab"
        assert_eq!(learned[3], "abab");
        assert_eq!(v.encode("ababab"), vec![v.id("abab").unwrap(), v.id("ab").unwrap()]);
    }

    #[test]
    fn encoding_never_yields_mask_or_nota() {
        let v = Vocabulary::build(&corpus("[MASK] [NOTA] hello"), 100, VocabMode::Word).unwrap();
        let ids = v.encode("[MASK] hello [NOTA] unseen");
        assert_eq!(ids[0], UNK);
        assert_eq!(ids[2], UNK);
        assert!(ids.iter().all(|&i| i != MASK && i != NOTA));
    }

    #[test]
    fn vocabulary_file_round_trips_bit_exactly() {
        let v = Vocabulary::build(&corpus("the cat, the hat. a b"), 100, VocabMode::Char).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text, VocabMode::Char).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), text);
        assert!(back.id(" ").is_some());
    }
}
