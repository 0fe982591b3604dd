//! Token and categorical-distribution primitives.
//!
//! Probabilities are stored in linear space; distributions that fail the
//! normalization tolerance are rejected at construction rather than
//! silently renormalized, so backend bugs surface early.

use alloc::vec::Vec;

use crate::rng::RngStream;
use crate::{Error, Result};

/// Tolerance for the sum-to-one invariant at construction.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A normalized categorical distribution over a token vocabulary.
///
/// Invariants: every entry is non-negative and the entries sum to 1
/// within [`NORMALIZATION_TOL`]. Checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Wraps an already-normalized probability vector, validating the
    /// invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for (i, &p) in probs.iter().enumerate() {
            if p < 0.0 || !p.is_finite() {
                return Err(Error::NegativeWeight { index: i, value: p });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized { sum });
        }
        Ok(ProbDist { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn normalize(weights: &[f64]) -> Result<Self> {
        for (i, &w) in weights.iter().enumerate() {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::NegativeWeight { index: i, value: w });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Err(Error::AllZero);
        }
        Ok(ProbDist {
            probs: weights.iter().map(|w| w / sum).collect(),
        })
    }

    /// A point mass on `token`.
    pub fn point_mass(token: TokenId, vocab_size: usize) -> Result<Self> {
        if token.index() >= vocab_size {
            return Err(Error::TokenOutOfRange {
                token: token.0,
                vocab_size,
            });
        }
        let mut probs = alloc::vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        Ok(ProbDist { probs })
    }

    /// The uniform distribution over `vocab_size` tokens.
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::AllZero);
        }
        Ok(ProbDist {
            probs: alloc::vec![1.0 / vocab_size as f64; vocab_size],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Samples a token by inverse-CDF walk, consuming exactly one uniform
    /// draw from `rng`.
    pub fn sample(&self, rng: &mut RngStream) -> TokenId {
        let u = rng.next_f64();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                cum += p;
                if u < cum {
                    return TokenId(i as u32);
                }
            }
        }
        // Rounding can leave cum slightly below 1; fall back to the last
        // token with positive mass.
        TokenId(last_positive as u32)
    }

    /// Index of the maximal probability; ties broken by lowest index.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        let mut best_p = self.probs[0];
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        TokenId(best as u32)
    }

    /// Reweights entries proportionally to `p^(1/tau)` and renormalizes.
    /// `tau` must be strictly positive.
    pub fn apply_temperature(&self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::NonPositiveTemperature { tau });
        }
        if tau == 1.0 {
            return Ok(self.clone());
        }
        let exponent = 1.0 / tau;
        // Scale by the max to keep powers in range for sharp temperatures.
        let max = self.probs.iter().cloned().fold(0.0f64, f64::max);
        let weights: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { libm::pow(p / max, exponent) } else { 0.0 })
            .collect();
        ProbDist::normalize(&weights)
    }

    pub(crate) fn check_same_vocab(&self, other: &ProbDist) -> Result<()> {
        if self.vocab_size() != other.vocab_size() {
            return Err(Error::VocabMismatch {
                left: self.vocab_size(),
                right: other.vocab_size(),
            });
        }
        Ok(())
    }
}
