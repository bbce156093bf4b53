use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::{Error, Result};

/// Distribution over sequence lengths `1..=n_max`.
pub trait LengthPrior {
    fn n_max(&self) -> usize;

    fn prob(&self, n: usize) -> f64;

    fn log_prob(&self, n: usize) -> f64 {
        self.prob(n).ln()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> usize;
}

/// Add-one-smoothed empirical length distribution:
/// `p(n) = (count[n] + 1) / (total + n_max)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthDistribution {
    n_max: usize,
    /// `counts[n - 1]` is the number of sequences of length `n`.
    counts: Vec<u64>,
    total: u64,
}

impl LengthDistribution {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("n_max must be at least 1".into()));
        }
        let total = counts.iter().sum();
        Ok(Self {
            n_max: counts.len(),
            counts,
            total,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `p(n)` as an exact fraction `(numerator, denominator)`.
    pub fn prob_exact(&self, n: usize) -> (u64, u64) {
        let denom = self.total + self.n_max as u64;
        if n == 0 || n > self.n_max {
            return (0, denom);
        }
        (self.counts[n - 1] + 1, denom)
    }
}

impl LengthPrior for LengthDistribution {
    fn n_max(&self) -> usize {
        self.n_max
    }

    fn prob(&self, n: usize) -> f64 {
        let (num, den) = self.prob_exact(n);
        num as f64 / den as f64
    }

    fn sample(&self, rng: &mut dyn RngCore) -> usize {
        // Integer inverse CDF over the smoothed counts.
        let denom = self.total + self.n_max as u64;
        let mut u = uniform_below(rng, denom);
        for (i, &c) in self.counts.iter().enumerate() {
            if u < c + 1 {
                return i + 1;
            }
            u -= c + 1;
        }
        unreachable!("smoothed counts sum to the denominator")
    }
}

fn uniform_below(rng: &mut dyn RngCore, bound: u64) -> u64 {
    // rejection sampling keeps the draw exactly uniform
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// All mass on one length. Not smoothed; meant for tests and for callers
/// that already know the target length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointMass {
    pub n: usize,
}

impl LengthPrior for PointMass {
    fn n_max(&self) -> usize {
        self.n
    }

    fn prob(&self, n: usize) -> f64 {
        if n == self.n {
            1.0
        } else {
            0.0
        }
    }

    fn sample(&self, _rng: &mut dyn RngCore) -> usize {
        self.n
    }
}

pub fn estimate_length_dist(sequences: &[TokenSequence], n_max: usize) -> Result<LengthDistribution> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let mut counts = vec![0u64; n_max];
    for s in sequences {
        if s.len() > n_max {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                n_max,
            });
        }
        counts[s.len() - 1] += 1;
    }
    LengthDistribution::from_counts(counts)
}
