use super::{TokenSequence, Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

/// Splits a document into sentences ending in `.`, `?` or `!`. A trailing
/// fragment without terminal punctuation is kept as its own sentence.
pub fn split_sentences(doc: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in doc.char_indices() {
        if matches!(ch, '.' | '?' | '!') {
            let end = i + ch.len_utf8();
            let s = doc[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = doc[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Tokenizes every sentence of every document.
pub fn tokenize_corpus(docs: &[String], vocab: &Vocabulary) -> Vec<Vec<Vec<usize>>> {
    docs.iter()
        .map(|d| {
            split_sentences(d)
                .into_iter()
                .map(|s| vocab.encode(s))
                .filter(|ids| !ids.is_empty())
                .collect()
        })
        .collect()
}

/// Greedily packs whole sentences into `[CLS] … [SEP]` sequences of at most
/// `max_len` ids (both markers included). Packing restarts at each document
/// boundary; a sentence longer than the content budget is truncated and
/// emitted on its own.
pub fn pack_sequences(docs: &[Vec<Vec<usize>>], max_len: usize) -> Result<Vec<TokenSequence>> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    let cap = max_len - 2;
    let mut out = Vec::new();
    let emit = |content: &[usize], out: &mut Vec<TokenSequence>| -> Result<()> {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(content);
        ids.push(SEP);
        out.push(TokenSequence::new(ids)?);
        Ok(())
    };
    for doc in docs {
        let mut cur: Vec<usize> = Vec::new();
        for sentence in doc.iter().filter(|s| !s.is_empty()) {
            if sentence.len() > cap {
                if !cur.is_empty() {
                    emit(&cur, &mut out)?;
                    cur.clear();
                }
                emit(&sentence[..cap], &mut out)?;
                continue;
            }
            if cur.len() + sentence.len() > cap {
                emit(&cur, &mut out)?;
                cur.clear();
            }
            cur.extend_from_slice(sentence);
        }
        if !cur.is_empty() {
            emit(&cur, &mut out)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_short_sentences_share_one_sequence() {
        let docs = vec![vec![vec![6, 7, 8], vec![9, 10, 11]]];
        let packed = pack_sequences(&docs, 8).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].ids(), &[CLS, 6, 7, 8, 9, 10, 11, SEP]);
    }

    #[test]
    fn long_sentence_is_truncated_to_max_len() {
        let docs = vec![vec![(6..16).collect::<Vec<_>>()]];
        let packed = pack_sequences(&docs, 8).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].len(), 8);
        assert_eq!(packed[0].ids(), &[CLS, 6, 7, 8, 9, 10, 11, SEP]);
    }

    #[test]
    fn max_len_below_two_is_rejected() {
        assert!(pack_sequences(&[vec![vec![6]]], 1).is_err());
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        assert_eq!(
            split_sentences("the cat sat. did it? yes! trailing"),
            vec!["the cat sat.", "did it?", "yes!", "trailing"]
        );
        assert!(split_sentences("  ").is_empty());
    }

    proptest! {
        #[test]
        fn packing_conserves_tokens_minus_truncation(
            docs in prop::collection::vec(
                prop::collection::vec(prop::collection::vec(6usize..40, 1..15), 0..8),
                0..6,
            ),
            max_len in 2usize..20,
        ) {
            let packed = pack_sequences(&docs, max_len).unwrap();
            let cap = max_len - 2;
            let expected: usize = docs.iter().flatten().map(|s| s.len().min(cap)).sum();
            let content: usize = packed.iter().map(|s| s.len() - 2).sum();
            prop_assert_eq!(content, expected);
            for s in &packed {
                prop_assert!(s.len() <= max_len);
                prop_assert_eq!(s.ids()[0], CLS);
                prop_assert_eq!(*s.ids().last().unwrap(), SEP);
            }
            // Sentence order is preserved.
            let flat: Vec<usize> = packed.iter().flat_map(|s| s.ids()[1..s.len() - 1].to_vec()).collect();
            let src: Vec<usize> = docs.iter().flatten().flat_map(|s| s[..s.len().min(cap)].to_vec()).collect();
            prop_assert_eq!(flat, src);
        }
    }
}
