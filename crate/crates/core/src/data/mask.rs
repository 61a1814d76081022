use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{is_structural, TokenSequence, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScheme {
    /// Every selected position becomes `[MASK]`.
    PureMask,
    /// Selected positions become `[MASK]`, a random token, or stay unchanged
    /// with probability 0.8 / 0.1 / 0.1.
    Bert801010,
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScheme::PureMask => "pure-mask",
            MaskScheme::Bert801010 => "bert-80-10-10",
        })
    }
}

impl FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure-mask" | "pure" => Ok(MaskScheme::PureMask),
            "bert-80-10-10" | "bert" => Ok(MaskScheme::Bert801010),
            other => Err(Error::Config(format!("unknown mask scheme `{other}`"))),
        }
    }
}

/// `x^M`: the masked input plus the sorted set of selected positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub masked_positions: Vec<usize>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_positions.binary_search(&i).is_ok()
    }

    /// Restores the source ids at the masked positions.
    pub fn unmask(&self, source: &TokenSequence) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for &i in &self.masked_positions {
            ids[i] = source.ids()[i];
        }
        ids
    }
}

/// Selects each content position independently with probability `p`.
///
/// `vocab_size` bounds the random replacement tokens of the 80-10-10 scheme,
/// which are drawn uniformly from the non-special ids.
pub fn mask<R: Rng + ?Sized>(
    x: &TokenSequence,
    p: f64,
    rng: &mut R,
    scheme: MaskScheme,
    vocab_size: usize,
) -> Result<MaskedSequence> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("mask probability must lie in (0, 1), got {p}")));
    }
    if scheme == MaskScheme::Bert801010 && vocab_size <= NUM_SPECIALS {
        return Err(Error::Config("random-token masking needs a non-special vocabulary".into()));
    }
    let mut ids = x.ids().to_vec();
    let mut masked_positions = Vec::new();
    for (i, id) in ids.iter_mut().enumerate() {
        if is_structural(*id) || !rng.random_bool(p) {
            continue;
        }
        masked_positions.push(i);
        match scheme {
            MaskScheme::PureMask => *id = MASK,
            MaskScheme::Bert801010 => {
                let u: f64 = rng.random();
                if u < 0.8 {
                    *id = MASK;
                } else if u < 0.9 {
                    *id = rng.random_range(NUM_SPECIALS..vocab_size);
                }
            }
        }
    }
    Ok(MaskedSequence { ids, masked_positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, SEP};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: Vec<usize>) -> TokenSequence {
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn probability_out_of_range_is_rejected() {
        let x = seq(vec![CLS, 6, SEP]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(mask(&x, p, &mut rng, MaskScheme::PureMask, 10).is_err());
        }
    }

    #[test]
    fn empirical_mask_rate_matches_p() {
        let x = seq((0..100).map(|i| 6 + i % 20).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 0.15;
        let trials = 100_000;
        let mut selected = 0usize;
        for _ in 0..trials {
            selected += mask(&x, p, &mut rng, MaskScheme::PureMask, 30).unwrap().masked_positions.len();
        }
        let rate = selected as f64 / (trials * 100) as f64;
        assert!((rate - p).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn bert_scheme_sub_rates() {
        let x = seq((0..100).map(|i| 6 + i % 20).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut total, mut masks, mut kept, mut random) = (0usize, 0usize, 0usize, 0usize);
        while total < 100_000 {
            let m = mask(&x, 0.3, &mut rng, MaskScheme::Bert801010, 1000).unwrap();
            for &i in &m.masked_positions {
                total += 1;
                if m.ids[i] == MASK {
                    masks += 1;
                } else if m.ids[i] == x.ids()[i] {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        // A random draw equal to the source (1/994 of the time) counts as kept.
        let f = |c: usize| c as f64 / total as f64;
        assert!((f(masks) - 0.8).abs() < 0.01, "{}", f(masks));
        assert!((f(random) - 0.1).abs() < 0.01, "{}", f(random));
        assert!((f(kept) - 0.1).abs() < 0.01, "{}", f(kept));
    }

    proptest! {
        #[test]
        fn masking_invariants(
            body in prop::collection::vec(5usize..40, 1..60),
            p in 0.01f64..0.99,
            seed in any::<u64>(),
            bert in any::<bool>(),
        ) {
            let mut ids = vec![CLS];
            ids.extend(&body);
            ids.push(SEP);
            ids.push(0);
            let x = seq(ids);
            let scheme = if bert { MaskScheme::Bert801010 } else { MaskScheme::PureMask };
            let a = mask(&x, p, &mut ChaCha8Rng::seed_from_u64(seed), scheme, 40).unwrap();
            let b = mask(&x, p, &mut ChaCha8Rng::seed_from_u64(seed), scheme, 40).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.masked_positions.windows(2).all(|w| w[0] < w[1]));
            for &i in &a.masked_positions {
                prop_assert!(!is_structural(x.ids()[i]));
            }
            for i in 0..x.len() {
                if !a.is_masked(i) {
                    prop_assert_eq!(a.ids[i], x.ids()[i]);
                } else if !bert {
                    prop_assert_eq!(a.ids[i], MASK);
                }
                if !bert {
                    prop_assert_eq!(a.ids[i] == MASK, a.is_masked(i));
                }
            }
            prop_assert_eq!(a.unmask(&x), x.ids().to_vec());
        }
    }
}
