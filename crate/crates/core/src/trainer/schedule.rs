use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Progressive SDS weight `lambda0 * 2^-max(0, floor((t - t0) / k))`.
pub fn sds_weight(epoch: usize, lambda0: f64, t0: usize, k: usize) -> f64 {
    let k = k.max(1);
    let halvings = epoch.saturating_sub(t0) / k;
    lambda0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// `floor(x + 1/2)`, tolerant to representation error just below a half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Given,
    CanonicalSds,
    ObservationSds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub n_given: usize,
    pub n_canonical_sds: usize,
    pub n_observation_sds: usize,
    pub order: Vec<IterationKind>,
}

impl IterationPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Splits `n` iterations into given-view and dual-space parts (given-view
/// first, half-up rounding) and shuffles their order with `seed`.
pub fn schedule_epoch(n: usize, ratio_dual: f64, ratio_canonical: f64, seed: u64) -> Result<IterationPlan> {
    if n == 0 {
        return Err(Error::validation("an epoch needs at least one iteration"));
    }
    for (name, r) in [("ratio_dual", ratio_dual), ("ratio_canonical", ratio_canonical)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::validation(format!("{name} must lie in [0, 1], got {r}")));
        }
    }
    let n_given = round_half_up(n as f64 * (1.0 - ratio_dual)).min(n);
    let rest = n - n_given;
    let n_canonical_sds = round_half_up(rest as f64 * ratio_canonical).min(rest);
    let n_observation_sds = rest - n_canonical_sds;
    let mut order: Vec<IterationKind> = std::iter::repeat(IterationKind::Given)
        .take(n_given)
        .chain(std::iter::repeat(IterationKind::CanonicalSds).take(n_canonical_sds))
        .chain(std::iter::repeat(IterationKind::ObservationSds).take(n_observation_sds))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(IterationPlan {
        n_given,
        n_canonical_sds,
        n_observation_sds,
        order,
    })
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
