//! Exact information-theoretic checks on tiny enumerable languages.
//!
//! A [`ToyLanguage`] fixes a distribution over all `v^n` sentences, a mask
//! rate and a controller. [`enumerate_joint`] lists every outcome of
//! (sentence `X`, masked subset `M`, corrupted sentence `X^R`) with its exact
//! probability; the replacement flags `Z_i = [X^R_i ≠ X_i]` are derived.
//! Entropies are in bits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_VOCAB: usize = 6;
pub const MAX_LEN: usize = 4;

/// How masked positions are refilled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    /// Uniform over the `v` tokens.
    Uniform,
    /// Always restores the original token.
    Perfect,
    /// `P(token | x^M, i)`: rows indexed by `x^M` (base `v + 1`, the digit `v`
    /// standing for the mask symbol, first position most significant) times
    /// `n` positions, each row a distribution over `v` tokens.
    Table(Vec<f64>),
}

/// An explicit finite sentence distribution with its corruption process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguage {
    pub v: usize,
    pub n: usize,
    /// `probs[s]` for sentence index `s` (base `v`, first position most significant).
    pub probs: Vec<f64>,
    pub p: f64,
    pub controller: Controller,
}

fn digits(mut index: usize, base: usize, n: usize) -> Vec<usize> {
    let mut d = vec![0; n];
    for slot in d.iter_mut().rev() {
        *slot = index % base;
        index /= base;
    }
    d
}

fn undigits(d: &[usize], base: usize) -> usize {
    d.iter().fold(0, |acc, &x| acc * base + x)
}

impl ToyLanguage {
    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.n == 0 {
            return Err(Error::Config("vocabulary size and length must be positive".into()));
        }
        if self.v > MAX_VOCAB || self.n > MAX_LEN {
            return Err(Error::Budget(format!(
                "v = {}, n = {} exceeds v <= {MAX_VOCAB}, n <= {MAX_LEN}",
                self.v, self.n
            )));
        }
        let sentences = self.v.pow(self.n as u32);
        if self.probs.len() != sentences {
            return Err(Error::Config(format!(
                "{} sentence probabilities for {sentences} sentences",
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
            return Err(Error::Config("sentence probabilities must be finite and non-negative".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("sentence probabilities sum to {total}")));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("mask probability {} outside [0, 1]", self.p)));
        }
        if let Controller::Table(t) = &self.controller {
            let rows = (self.v + 1).pow(self.n as u32) * self.n;
            if t.len() != rows * self.v {
                return Err(Error::Config(format!(
                    "controller table needs {} entries, got {}",
                    rows * self.v,
                    t.len()
                )));
            }
            for row in t.chunks(self.v) {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&q| !(q >= 0.0 && q.is_finite())) || (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Config("controller rows must be distributions".into()));
                }
            }
        }
        Ok(())
    }

    /// Replacement distribution at position `i` given the masked sentence
    /// and (for the perfect controller) the original token.
    fn controller_row(&self, masked: &[usize], i: usize, original: usize) -> Vec<f64> {
        match &self.controller {
            Controller::Uniform => vec![1.0 / self.v as f64; self.v],
            Controller::Perfect => (0..self.v).map(|t| if t == original { 1.0 } else { 0.0 }).collect(),
            Controller::Table(t) => {
                let row = undigits(masked, self.v + 1) * self.n + i;
                t[row * self.v..(row + 1) * self.v].to_vec()
            }
        }
    }

    /// A random language with `2 <= v <= max_v`, `1 <= n <= max_n`,
    /// Dirichlet(1) sentence probabilities (some sentences dropped),
    /// `0 < p < 1` and a random controller table.
    pub fn random<R: Rng + ?Sized>(max_v: usize, max_n: usize, rng: &mut R) -> Self {
        let v = rng.random_range(2..=max_v.max(2));
        let n = rng.random_range(1..=max_n.max(1));
        let sentences = v.pow(n as u32);
        let mut probs: Vec<f64> = (0..sentences)
            .map(|_| {
                if sentences > 2 && rng.random_bool(0.2) {
                    0.0
                } else {
                    Exp1.sample(rng)
                }
            })
            .collect();
        if probs.iter().all(|&q| q == 0.0) {
            probs[0] = 1.0;
        }
        normalize(&mut probs);
        let rows = (v + 1).pow(n as u32) * n;
        let mut table: Vec<f64> = (0..rows * v).map(|_| Exp1.sample(rng)).collect();
        for row in table.chunks_mut(v) {
            normalize(row);
        }
        ToyLanguage {
            v,
            n,
            probs,
            p: rng.random_range(0.05..0.95),
            controller: Controller::Table(table),
        }
    }
}

fn normalize(xs: &mut [f64]) {
    let s: f64 = xs.iter().sum();
    for x in xs.iter_mut() {
        *x /= s;
    }
    // Put the rounding residue on the largest entry so the sum is 1 to ~1 ulp.
    let r = 1.0 - xs.iter().sum::<f64>();
    if let Some(m) = xs.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *m += r;
    }
}

/// Random variables of the joint table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rv {
    X,
    M,
    XR,
    Z,
}

/// One outcome `(x, m, x^R)` with its probability; `z` is derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub x: usize,
    pub m: usize,
    pub xr: usize,
    pub z: usize,
    pub prob: f64,
}

impl Outcome {
    fn get(&self, rv: Rv) -> usize {
        match rv {
            Rv::X => self.x,
            Rv::M => self.m,
            Rv::XR => self.xr,
            Rv::Z => self.z,
        }
    }
}

/// Exact joint distribution over `(X, M, X^R)` (positive-probability outcomes).
#[derive(Clone, Debug)]
pub struct JointTable {
    pub v: usize,
    pub n: usize,
    pub outcomes: Vec<Outcome>,
}

/// Enumerates every outcome under independent masking with rate `p` and
/// controller replacement at masked positions.
pub fn enumerate_joint(lang: &ToyLanguage) -> Result<JointTable> {
    lang.validate()?;
    let (v, n) = (lang.v, lang.n);
    let mut outcomes = Vec::new();
    for (xi, &px) in lang.probs.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        let x = digits(xi, v, n);
        for m in 0..(1usize << n) {
            let k = m.count_ones() as i32;
            let pm = lang.p.powi(k) * (1.0 - lang.p).powi(n as i32 - k);
            if pm == 0.0 {
                continue;
            }
            let is_masked = |i: usize| m >> (n - 1 - i) & 1 == 1;
            let masked: Vec<usize> = (0..n).map(|i| if is_masked(i) { v } else { x[i] }).collect();
            let positions: Vec<usize> = (0..n).filter(|&i| is_masked(i)).collect();
            let rows: Vec<Vec<f64>> = positions
                .iter()
                .map(|&i| lang.controller_row(&masked, i, x[i]))
                .collect();
            // Every fill of the masked positions.
            for fill in 0..v.pow(positions.len() as u32) {
                let choice = digits(fill, v, positions.len());
                let mut pr = px * pm;
                let mut xr = x.clone();
                for (j, &i) in positions.iter().enumerate() {
                    pr *= rows[j][choice[j]];
                    xr[i] = choice[j];
                }
                if pr == 0.0 {
                    continue;
                }
                let z = (0..n).fold(0, |acc, i| acc << 1 | usize::from(xr[i] != x[i]));
                outcomes.push(Outcome {
                    x: xi,
                    m,
                    xr: undigits(&xr, v),
                    z,
                    prob: pr,
                });
            }
        }
    }
    Ok(JointTable { v, n, outcomes })
}

impl JointTable {
    pub fn total_mass(&self) -> f64 {
        self.outcomes.iter().map(|o| o.prob).sum()
    }

    /// `H(target | given)` in bits. Both the joint and the conditioning
    /// marginals are accumulated over the outcomes in the same order, so a
    /// target that is a function of `given` yields exactly zero.
    pub fn conditional_entropy(&self, target: &[Rv], given: &[Rv]) -> f64 {
        let key = |o: &Outcome, vars: &[Rv]| -> Vec<usize> { vars.iter().map(|&r| o.get(r)).collect() };
        let mut joint: BTreeMap<(Vec<usize>, Vec<usize>), f64> = BTreeMap::new();
        let mut marginal: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for o in &self.outcomes {
            let g = key(o, given);
            *joint.entry((key(o, target), g.clone())).or_insert(0.0) += o.prob;
            *marginal.entry(g).or_insert(0.0) += o.prob;
        }
        let mut h = 0.0;
        for ((_, g), &pab) in &joint {
            if pab > 0.0 {
                let pb = marginal[g];
                h -= pab * (pab / pb).log2();
            }
        }
        // Conditional entropy is non-negative; clear round-off below zero.
        h.max(0.0)
    }

    pub fn entropy(&self, target: &[Rv]) -> f64 {
        self.conditional_entropy(target, &[])
    }
}

/// Result of checking `H(X|X^R) = H(X,Z|X^R) ≥ H(Z|X^R)` on one language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub v: usize,
    pub n: usize,
    pub p: f64,
    pub h_x: f64,
    pub h_x_given_xr: f64,
    pub h_xz_given_xr: f64,
    pub h_z_given_xr: f64,
    pub h_z_given_x_xr: f64,
    pub h_x_given_xr_z: f64,
    pub equality_holds: bool,
    pub inequality_holds: bool,
    pub holds_strictly: bool,
    pub total_mass: f64,
}

impl EntropyReport {
    pub fn passed(&self) -> bool {
        self.equality_holds && self.inequality_holds && self.h_z_given_x_xr == 0.0
    }
}

pub const EQUALITY_TOL: f64 = 1e-9;

pub fn verify_inequality(lang: &ToyLanguage) -> Result<EntropyReport> {
    let joint = enumerate_joint(lang)?;
    let h_x_given_xr = joint.conditional_entropy(&[Rv::X], &[Rv::XR]);
    let h_xz_given_xr = joint.conditional_entropy(&[Rv::X, Rv::Z], &[Rv::XR]);
    let h_z_given_xr = joint.conditional_entropy(&[Rv::Z], &[Rv::XR]);
    let h_x_given_xr_z = joint.conditional_entropy(&[Rv::X], &[Rv::XR, Rv::Z]);
    Ok(EntropyReport {
        v: lang.v,
        n: lang.n,
        p: lang.p,
        h_x: joint.entropy(&[Rv::X]),
        h_x_given_xr,
        h_xz_given_xr,
        h_z_given_xr,
        h_z_given_x_xr: joint.conditional_entropy(&[Rv::Z], &[Rv::X, Rv::XR]),
        h_x_given_xr_z,
        equality_holds: (h_x_given_xr - h_xz_given_xr).abs() <= EQUALITY_TOL,
        inequality_holds: h_x_given_xr >= h_z_given_xr - EQUALITY_TOL,
        holds_strictly: h_x_given_xr - h_z_given_xr > EQUALITY_TOL,
        total_mass: joint.total_mass(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_language(v: usize, n: usize, p: f64, controller: Controller) -> ToyLanguage {
        let s = v.pow(n as u32);
        ToyLanguage {
            v,
            n,
            probs: vec![1.0 / s as f64; s],
            p,
            controller,
        }
    }

    fn h2(q: &[f64]) -> f64 {
        q.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
    }

    #[test]
    fn no_masking_means_no_corruption() {
        let lang = uniform_language(3, 2, 0.0, Controller::Uniform);
        let j = enumerate_joint(&lang).unwrap();
        assert!(j.outcomes.iter().all(|o| o.xr == o.x && o.z == 0));
        let r = verify_inequality(&lang).unwrap();
        assert_eq!(r.h_x_given_xr, 0.0);
        assert_eq!(r.h_z_given_xr, 0.0);
        assert!(r.passed() && !r.holds_strictly);
    }

    #[test]
    fn perfect_controller_keeps_z_constant() {
        for p in [0.1, 0.5, 1.0] {
            let j = enumerate_joint(&uniform_language(3, 3, p, Controller::Perfect)).unwrap();
            assert!(j.outcomes.iter().all(|o| o.z == 0));
            assert_eq!(j.entropy(&[Rv::Z]), 0.0);
        }
    }

    #[test]
    fn mass_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let lang = ToyLanguage::random(5, 3, &mut rng);
            assert!((enumerate_joint(&lang).unwrap().total_mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn self_conditioning_and_determinism_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = enumerate_joint(&ToyLanguage::random(4, 3, &mut rng)).unwrap();
        assert_eq!(j.conditional_entropy(&[Rv::X], &[Rv::X]), 0.0);
        assert_eq!(j.conditional_entropy(&[Rv::Z], &[Rv::X, Rv::XR]), 0.0);
    }

    #[test]
    fn binary_channel_closed_form() {
        // v = 2, n = 1: P(X^R = j | X = i) = (1 - p)[i = j] + p q_j.
        let cases = [(0.5, 1.0, [0.5, 0.5]), (0.3, 0.6, [0.8, 0.2]), (0.9, 0.25, [0.1, 0.9])];
        for (a, p, q) in cases {
            let px = [a, 1.0 - a];
            let mut table = vec![0.0; 2 * 3];
            // Only the fully masked row (digit 2) is ever consulted.
            table[4] = q[0];
            table[5] = q[1];
            table[0] = 1.0;
            table[3] = 1.0;
            let lang = ToyLanguage {
                v: 2,
                n: 1,
                probs: px.to_vec(),
                p,
                controller: Controller::Table(table),
            };
            let chan = |i: usize, j: usize| (1.0 - p) * f64::from(u8::from(i == j)) + p * q[j];
            let joint: Vec<f64> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| px[i] * chan(i, j)).collect();
            let pxr = [joint[0] + joint[2], joint[1] + joint[3]];
            let want = h2(&joint) - h2(&pxr);
            let r = verify_inequality(&lang).unwrap();
            assert!((r.h_x_given_xr - want).abs() < 1e-12, "{} vs {want}", r.h_x_given_xr);
            if p == 1.0 && a == 0.5 {
                assert!((r.h_x_given_xr - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_language_has_zero_entropies() {
        let mut probs = vec![0.0; 9];
        probs[4] = 1.0;
        let lang = ToyLanguage {
            v: 3,
            n: 2,
            probs,
            p: 0.5,
            controller: Controller::Uniform,
        };
        let r = verify_inequality(&lang).unwrap();
        assert_eq!(r.h_x_given_xr, 0.0);
        assert_eq!(r.h_x, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn random_languages_satisfy_the_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let lang = ToyLanguage::random(5, 3, &mut rng);
            let r = verify_inequality(&lang).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.h_x_given_xr <= r.h_x + 1e-12);
            assert!((r.h_x_given_xr - r.h_z_given_xr - r.h_x_given_xr_z).abs() < 1e-9);
            if r.h_x_given_xr_z > 2.0 * EQUALITY_TOL {
                assert!(r.holds_strictly);
            }
        }
    }

    #[test]
    fn budget_and_validation() {
        let big = uniform_language(2, 5, 0.5, Controller::Uniform);
        assert!(matches!(big.validate(), Err(Error::Budget(_))));
        let mut bad = uniform_language(2, 2, 0.5, Controller::Uniform);
        bad.probs[0] += 0.1;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
