use rand::Rng;

use crate::autograd::Scalar;
use crate::data::{is_unsamplable, MaskedSequence, TokenSequence};
use crate::error::{Error, Result};

/// Per-position categorical distributions over the vocabulary, row-major
/// `[positions, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistributions {
    vocab: usize,
    probs: Vec<f64>,
}

impl TokenDistributions {
    pub fn new(vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab == 0 || !probs.len().is_multiple_of(vocab) {
            return Err(Error::shape(
                "distributions",
                format!("{} values for vocabulary {vocab}", probs.len()),
            ));
        }
        Ok(TokenDistributions { vocab, probs })
    }

    /// Row-wise softmax of `[positions, vocab]` logits, computed in `f64`.
    pub fn from_logits<T: Scalar>(vocab: usize, logits: &[T]) -> Result<Self> {
        let mut probs: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        if vocab == 0 || !probs.len().is_multiple_of(vocab) {
            return Err(Error::shape("distributions", "logit count"));
        }
        for row in probs.chunks_mut(vocab) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(TokenDistributions { vocab, probs })
    }

    /// The same distribution at every one of `positions` rows.
    pub fn repeated(row: &[f64], positions: usize) -> Self {
        TokenDistributions {
            vocab: row.len(),
            probs: row.repeat(positions),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn positions(&self) -> usize {
        self.probs.len() / self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Draws one id from `probs` restricted to ids where `eligible` holds,
/// renormalizing over that subset.
pub fn sample_restricted<R: Rng + ?Sized>(
    probs: &[f64],
    eligible: impl Fn(usize) -> bool,
    rng: &mut R,
) -> Result<usize> {
    let mass: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| eligible(i))
        .map(|(_, &p)| p)
        .sum();
    if !mass.is_finite() {
        return Err(Error::NonFinite(format!("controller distribution (eligible mass {mass})")));
    }
    if mass <= 0.0 {
        return Err(Error::Sampling(format!("no probability mass on eligible tokens (mass {mass})")));
    }
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 && eligible(i) {
            acc += p;
            last = Some(i);
            if u < acc {
                return Ok(i);
            }
        }
    }
    // Rounding can leave `u` a hair above the accumulated mass.
    last.ok_or_else(|| Error::Sampling("empty support".into()))
}

/// `x^R`: the corrupted sequence and its replacement flags
/// `z_i = [x^R_i ≠ x_i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedSequence {
    pub ids: Vec<usize>,
    pub replaced: Vec<bool>,
    pub masked_positions: Vec<usize>,
}

impl CorruptedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn replaced_count(&self) -> usize {
        self.replaced.iter().filter(|&&z| z).count()
    }
}

/// Copies unmasked positions of `xm` and samples every masked position from
/// the controller distribution at that position, never producing
/// `[PAD]`, `[MASK]`, `[NOTA]`, `[CLS]` or `[SEP]`.
pub fn replace<R: Rng + ?Sized>(
    x: &TokenSequence,
    xm: &MaskedSequence,
    dist: &TokenDistributions,
    rng: &mut R,
) -> Result<CorruptedSequence> {
    if xm.len() != x.len() || dist.positions() != x.len() {
        return Err(Error::shape(
            "replace",
            format!("sequence {}, masked {}, distributions {}", x.len(), xm.len(), dist.positions()),
        ));
    }
    let mut ids = xm.ids.clone();
    for &i in &xm.masked_positions {
        ids[i] = sample_restricted(dist.row(i), |t| !is_unsamplable(t), rng)?;
    }
    let replaced = ids.iter().zip(x.ids()).map(|(a, b)| a != b).collect();
    Ok(CorruptedSequence {
        ids,
        replaced,
        masked_positions: xm.masked_positions.clone(),
    })
}

/// Position subset scored by the ELECTRA-sample discriminator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledPositions {
    pub positions: Vec<usize>,
    /// Set when the masked positions alone exceed half of the candidates.
    pub flagged: bool,
}

/// All masked positions plus uniformly chosen unmasked ones, so that exactly
/// `⌈n/2⌉` of the `n = candidates.len()` positions are returned (sorted).
pub fn electra_sample_positions<R: Rng + ?Sized>(
    candidates: &[usize],
    masked: &[usize],
    rng: &mut R,
) -> SampledPositions {
    let n = candidates.len();
    let half = n.div_ceil(2);
    let is_masked = |p: &usize| masked.binary_search(p).is_ok();
    let mut positions: Vec<usize> = candidates.iter().copied().filter(is_masked).collect();
    if positions.len() > half {
        return SampledPositions {
            positions,
            flagged: true,
        };
    }
    let rest: Vec<usize> = candidates.iter().copied().filter(|p| !is_masked(p)).collect();
    let extra = half - positions.len();
    positions.extend(rand::seq::index::sample(rng, rest.len(), extra).into_iter().map(|j| rest[j]));
    positions.sort_unstable();
    SampledPositions {
        positions,
        flagged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mask, MaskScheme, CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(v: usize, hot: usize) -> Vec<f64> {
        (0..v).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn perfect_controller_is_identity() {
        let x = TokenSequence::new(vec![CLS, 6, 7, 8, 9, SEP]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xm = mask(&x, 0.9, &mut rng, MaskScheme::PureMask, 12).unwrap();
        let rows: Vec<f64> = x.ids().iter().flat_map(|&t| one_hot(12, t)).collect();
        let dist = TokenDistributions::new(12, rows).unwrap();
        let xr = replace(&x, &xm, &dist, &mut rng).unwrap();
        assert_eq!(xr.ids, x.ids());
        assert!(xr.replaced.iter().all(|&z| !z));
    }

    #[test]
    fn wrong_controller_replaces_exactly_the_masked_positions() {
        let x = TokenSequence::new(vec![CLS, 6, 7, 8, 9, SEP]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xm = mask(&x, 0.5, &mut rng, MaskScheme::PureMask, 12).unwrap();
        let dist = TokenDistributions::repeated(&one_hot(12, 11), x.len());
        let xr = replace(&x, &xm, &dist, &mut rng).unwrap();
        for i in 0..x.len() {
            assert_eq!(xr.replaced[i], xm.is_masked(i));
            if !xm.is_masked(i) {
                assert_eq!(xr.ids[i], xm.ids[i]);
            }
        }
    }

    #[test]
    fn specials_are_renormalized_away_and_zero_mass_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = vec![0.0; 8];
        p[1] = 0.9; // [MASK]
        p[7] = 0.1;
        for _ in 0..100 {
            assert_eq!(sample_restricted(&p, |t| !is_unsamplable(t), &mut rng).unwrap(), 7);
        }
        let only_specials = one_hot(8, 2);
        assert!(matches!(
            sample_restricted(&only_specials, |t| !is_unsamplable(t), &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn sample_positions_size_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cand: Vec<usize> = (0..100).collect();
        let masked: Vec<usize> = (0..100).step_by(7).take(15).collect();
        let s = electra_sample_positions(&cand, &masked, &mut rng);
        assert_eq!(s.positions.len(), 50);
        assert!(!s.flagged);
        assert!(masked.iter().all(|m| s.positions.contains(m)));

        let s = electra_sample_positions(&[0, 1, 2, 3], &[0, 1, 3], &mut rng);
        assert!(s.flagged);
        assert_eq!(s.positions, vec![0, 1, 3]);
    }

    #[test]
    fn unmasked_inclusion_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cand: Vec<usize> = (0..100).collect();
        let masked: Vec<usize> = (0..15).map(|i| i * 6).collect();
        let trials = 100_000;
        let mut hits = vec![0usize; 100];
        for _ in 0..trials {
            for p in electra_sample_positions(&cand, &masked, &mut rng).positions {
                hits[p] += 1;
            }
        }
        let want = 35.0 / 85.0;
        for p in (0..100).filter(|p| !masked.contains(p)) {
            let f = hits[p] as f64 / trials as f64;
            assert!((f - want).abs() < 0.01, "position {p}: {f}");
        }
    }
}
