//! Complete randomization and the accept/reject loop.

use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::{DesignModel, MeanDifference};
use crate::criterion::{quadratic_form, BalanceCriterion};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream, StreamRng, TAG_BATCH};
use crate::threshold::Threshold;

/// A treatment assignment: `w[i] == 1` puts unit `i` in the treated group.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    w: Vec<u8>,
    n1: usize,
}

impl Assignment {
    pub fn new(w: Vec<u8>) -> Result<Self> {
        if let Some(bad) = w.iter().position(|&v| v > 1) {
            return Err(Error::InvalidParameter(format!("assignment entry {bad} is not 0 or 1")));
        }
        let n1 = w.iter().filter(|&&v| v == 1).count();
        Ok(Self { w, n1 })
    }

    fn from_treated(n: usize, treated: impl IntoIterator<Item = usize>) -> Self {
        let mut w = vec![0u8; n];
        let mut n1 = 0;
        for i in treated {
            w[i] = 1;
            n1 += 1;
        }
        Self { w, n1 }
    }

    pub fn w(&self) -> &[u8] {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.w.len() - self.n1
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.w[i] == 1
    }

    /// The mirror assignment `1 − w`.
    pub fn flipped(&self) -> Self {
        Self { w: self.w.iter().map(|v| 1 - v).collect(), n1: self.n0() }
    }
}

/// Draws `n1` treated units uniformly among all subsets of size `n1`.
pub fn complete_randomization<R: Rng + ?Sized>(n: usize, n1: usize, rng: &mut R) -> Result<Assignment> {
    if n1 == 0 || n1 >= n {
        return Err(Error::BadCounts { n, n1 });
    }
    Ok(Assignment::from_treated(n, rand::seq::index::sample(rng, n, n1)))
}

/// An accepted assignment with the diagnostics of the loop that found it.
#[derive(Clone, Debug, Serialize)]
pub struct RerandomizationResult {
    pub assignment: Assignment,
    pub draws_used: u64,
    pub q_value: f64,
    pub mean_diff: MeanDifference,
    pub seed: u64,
}

/// Default cap on the number of candidate draws, `ceil(50/α)`.
pub fn default_max_draws(alpha: f64) -> u64 {
    (50.0 / alpha).ceil() as u64
}

/// Runs the loop with a generator seeded from `seed`; reproducible.
pub fn rerandomize_seeded(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    seed: u64,
    max_draws: u64,
) -> Result<RerandomizationResult> {
    if criterion.dim() != design.d() {
        return Err(Error::DimensionMismatch { expected: design.d(), got: criterion.dim() });
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let root_n = (design.n() as f64).sqrt();
    for draw in 1..=max_draws {
        let w = complete_randomization(design.n(), design.n1(), &mut rng)?;
        let tau_x = design.diff_from_mask(w.w());
        let scaled = &tau_x * root_n;
        let q = quadratic_form(criterion.a_matrix(), &scaled);
        if threshold.accepts(q) {
            return Ok(RerandomizationResult {
                assignment: w,
                draws_used: draw,
                q_value: q,
                mean_diff: MeanDifference { tau_x, scaled },
                seed,
            });
        }
    }
    Err(Error::MaxDrawsExceeded(max_draws))
}

/// Draws complete randomizations until `Q ≤ a`.
pub fn rerandomize<R: RngCore + ?Sized>(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    rng: &mut R,
    max_draws: u64,
) -> Result<RerandomizationResult> {
    rerandomize_seeded(design, criterion, threshold, rng.next_u64(), max_draws)
}

/// `m` independent accepted assignments, one substream per slot.
pub fn batch_accepted<R: RngCore + ?Sized>(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    m: usize,
    rng: &mut R,
    max_draws: u64,
) -> Result<Vec<RerandomizationResult>> {
    let base = derive_seed(rng.next_u64(), &[TAG_BATCH]);
    (0..m)
        .into_par_iter()
        .map(|slot| {
            let seed = substream(base, slot as u64).next_u64();
            rerandomize_seeded(design, criterion, threshold, seed, max_draws)
        })
        .collect()
}
