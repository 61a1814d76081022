use rand::seq::SliceRandom;
use rand::Rng;

use super::sampling::{sample_restricted, CorruptedSequence, TokenDistributions};
use crate::data::{is_unsamplable, TokenSequence, NOTA};
use crate::error::{Error, Result};

/// The `k` choices offered at one position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub position: usize,
    /// Exactly `k` distinct ids, shuffled.
    pub candidates: Vec<usize>,
    /// Index into `candidates` of the training label.
    pub target: usize,
    /// Sampled distractors in draw order.
    pub negatives: Vec<usize>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn label(&self) -> usize {
        self.candidates[self.target]
    }

    pub fn contains(&self, id: usize) -> bool {
        self.candidates.contains(&id)
    }
}

/// Draws `count` distinct ids without replacement from `probs` restricted to
/// `eligible`. Once the eligible ids with positive probability are used up,
/// the remainder is filled uniformly from the eligible zero-probability ids.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    probs: &[f64],
    eligible: impl Fn(usize) -> bool,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let available = (0..probs.len()).filter(|&t| eligible(t)).count();
    if available < count {
        return Err(Error::Support {
            needed: count,
            available,
        });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while chosen.len() < count {
        let open = |t: usize| eligible(t) && !chosen.contains(&t);
        let positive = probs.iter().enumerate().any(|(t, &p)| p > 0.0 && open(t));
        let next = if positive {
            sample_restricted(probs, open, rng)?
        } else {
            let rest: Vec<usize> = (0..probs.len()).filter(|&t| open(t)).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen.push(next);
    }
    Ok(chosen)
}

fn finish<R: Rng + ?Sized>(
    position: usize,
    mut candidates: Vec<usize>,
    label: usize,
    negatives: Vec<usize>,
    rng: &mut R,
) -> Result<CandidateSet> {
    candidates.shuffle(rng);
    let target = candidates
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::Internal("label missing from candidate set".into()))?;
    Ok(CandidateSet {
        position,
        candidates,
        target,
        negatives,
    })
}

fn check_inputs(x: &TokenSequence, xr: &CorruptedSequence, dist: &TokenDistributions, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if xr.len() != x.len() || dist.positions() != x.len() {
        return Err(Error::shape(
            "candidates",
            format!("sequence {}, corrupted {}, distributions {}", x.len(), xr.len(), dist.positions()),
        ));
    }
    Ok(())
}

/// Candidate set at one position. Unreplaced positions get `k − 1`
/// negatives plus `[NOTA]` (label `[NOTA]`); replaced positions get `k − 2`
/// negatives plus the original token and `[NOTA]` (label the original).
/// Negatives never include the original token or a special id; the
/// corrupted token may appear as a distractor.
pub fn candidate_set<R: Rng + ?Sized>(
    position: usize,
    original: usize,
    corrupted: usize,
    probs: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<CandidateSet> {
    let eligible = |t: usize| t != original && !is_unsamplable(t);
    if corrupted == original {
        let negatives = sample_without_replacement(probs, eligible, k - 1, rng)?;
        let mut c = negatives.clone();
        c.push(NOTA);
        finish(position, c, NOTA, negatives, rng)
    } else {
        let negatives = sample_without_replacement(probs, eligible, k - 2, rng)?;
        let mut c = negatives.clone();
        c.push(original);
        c.push(NOTA);
        finish(position, c, original, negatives, rng)
    }
}

/// One candidate set per position in `positions`.
pub fn build_candidates<R: Rng + ?Sized>(
    x: &TokenSequence,
    xr: &CorruptedSequence,
    dist: &TokenDistributions,
    k: usize,
    positions: &[usize],
    rng: &mut R,
) -> Result<Vec<CandidateSet>> {
    check_inputs(x, xr, dist, k)?;
    positions
        .iter()
        .map(|&i| candidate_set(i, x.ids()[i], xr.ids[i], dist.row(i), k, rng))
        .collect()
}

/// Ablation that always lists the original token and has no reject option:
/// `k − 1` negatives plus `x_i`, label `x_i`. At replaced positions the
/// corrupted token is also kept out of the negatives.
pub fn leaky_candidates<R: Rng + ?Sized>(
    x: &TokenSequence,
    xr: &CorruptedSequence,
    dist: &TokenDistributions,
    k: usize,
    positions: &[usize],
    rng: &mut R,
) -> Result<Vec<CandidateSet>> {
    check_inputs(x, xr, dist, k)?;
    positions
        .iter()
        .map(|&i| {
            let (orig, corr) = (x.ids()[i], xr.ids[i]);
            let eligible = |t: usize| t != orig && t != corr && !is_unsamplable(t);
            let negatives = sample_without_replacement(dist.row(i), eligible, k - 1, rng)?;
            let mut c = negatives.clone();
            c.push(orig);
            finish(i, c, orig, negatives, rng)
        })
        .collect()
}

/// Checks the structural rules of a (non-leaky) candidate set; returns a
/// description of the first violation.
pub fn candidate_violation(set: &CandidateSet, original: usize, corrupted: usize, k: usize) -> Option<String> {
    let c = &set.candidates;
    if c.len() != k {
        return Some(format!("size {} != {k}", c.len()));
    }
    let mut sorted = c.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Some("duplicate candidate".into());
    }
    if c.iter().filter(|&&t| t == NOTA).count() != 1 {
        return Some("[NOTA] multiplicity".into());
    }
    if c.iter().any(|&t| t != NOTA && t != original && is_unsamplable(t)) {
        return Some("special token offered".into());
    }
    if set.target >= c.len() {
        return Some("target index out of range".into());
    }
    if set.negatives.contains(&original) {
        return Some("original token drawn as negative".into());
    }
    if corrupted == original {
        if c.contains(&original) || set.label() != NOTA {
            return Some("unreplaced position must exclude x_i and target [NOTA]".into());
        }
    } else if set.label() != original {
        return Some("replaced position must target x_i".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k2_unreplaced_has_one_negative_and_nota() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = vec![0.1; 10];
        for _ in 0..100 {
            let s = candidate_set(0, 7, 7, &probs, 2, &mut rng).unwrap();
            assert_eq!(s.k(), 2);
            assert!(s.contains(NOTA));
            assert_eq!(s.label(), NOTA);
            assert_ne!(s.negatives[0], 7);
            assert!(candidate_violation(&s, 7, 7, 2).is_none());
        }
    }

    #[test]
    fn k2_replaced_is_exactly_original_and_nota() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = vec![0.1; 10];
        let s = candidate_set(0, 7, 8, &probs, 2, &mut rng).unwrap();
        let mut c = s.candidates.clone();
        c.sort_unstable();
        assert_eq!(c, vec![NOTA, 7]);
        assert!(s.negatives.is_empty());
        assert_eq!(s.label(), 7);
    }

    #[test]
    fn support_error_when_vocabulary_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // ids 5..8 are eligible (3 tokens); excluding x_i leaves 2.
        let probs = vec![0.125; 8];
        assert!(matches!(
            candidate_set(0, 6, 6, &probs, 4, &mut rng),
            Err(Error::Support { needed: 3, available: 2 })
        ));
        assert!(candidate_set(0, 6, 6, &probs, 3, &mut rng).is_ok());
    }

    #[test]
    fn zero_mass_tokens_fill_only_after_support_is_exhausted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut probs = vec![0.0; 12];
        probs[9] = 1.0;
        for _ in 0..50 {
            let neg = sample_without_replacement(&probs, |t| !is_unsamplable(t), 3, &mut rng).unwrap();
            assert_eq!(neg[0], 9);
            assert_eq!(neg.len(), 3);
        }
    }

    #[test]
    fn leaky_sets_always_hold_the_original_and_no_nota() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = TokenSequence::new(vec![3, 6, 7, 8, 4]).unwrap();
        let xr = CorruptedSequence {
            ids: vec![3, 6, 9, 8, 4],
            replaced: vec![false, false, true, false, false],
            masked_positions: vec![2],
        };
        let dist = TokenDistributions::repeated(&[0.1; 14], 5);
        let sets = leaky_candidates(&x, &xr, &dist, 5, &[1, 2, 3], &mut rng).unwrap();
        for s in &sets {
            assert!(!s.contains(NOTA));
            assert_eq!(s.label(), x.ids()[s.position]);
            assert_eq!(s.k(), 5);
        }
        // Unreplaced: the label equals the visible input token.
        assert_eq!(sets[0].label(), xr.ids[1]);
        // Replaced: the corrupted token is not offered.
        assert!(!sets[1].contains(9));
    }
}
