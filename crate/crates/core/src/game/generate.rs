use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Edge, GameKind, PayoffMatrix, PolymatrixGame};
use crate::error::{Error, Result};

/// Support `[low, high)` of the i.i.d. uniform edge payoffs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayoffRange {
    pub low: f64,
    pub high: f64,
}

impl Default for PayoffRange {
    fn default() -> Self {
        PayoffRange { low: -1.0, high: 1.0 }
    }
}

impl PayoffRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(Error::input(format!(
                "payoff range [{}, {}) is empty or non-finite",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Fully connected zero-sum polymatrix game: `u_ji = -u_ij^T` for every pair.
pub fn generate_zero_sum<R: Rng + ?Sized>(
    action_counts: &[usize],
    range: PayoffRange,
    rng: &mut R,
) -> Result<PolymatrixGame> {
    generate(action_counts, range, rng, GameKind::ZeroSum, -1.0)
}

/// Fully connected potential polymatrix game: `u_ji = u_ij^T` for every pair,
/// with potential `phi = sum_i u_i / 2`.
pub fn generate_potential<R: Rng + ?Sized>(
    action_counts: &[usize],
    range: PayoffRange,
    rng: &mut R,
) -> Result<PolymatrixGame> {
    generate(action_counts, range, rng, GameKind::Potential, 1.0)
}

fn generate<R: Rng + ?Sized>(
    action_counts: &[usize],
    range: PayoffRange,
    rng: &mut R,
    kind: GameKind,
    mirror_sign: f64,
) -> Result<PolymatrixGame> {
    let n = action_counts.len();
    if n < 2 {
        return Err(Error::input(format!("need at least 2 agents, got {n}")));
    }
    range.validate()?;
    let dist = Uniform::new(range.low, range.high).map_err(|e| Error::input(e.to_string()))?;
    let mut edges = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in i + 1..n {
            let (rows, cols) = (action_counts[i], action_counts[j]);
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            let forward = PayoffMatrix::new(rows, cols, data)?;
            let backward = forward.transpose().scaled(mirror_sign);
            edges.push(Edge { from: i, to: j, matrix: forward });
            edges.push(Edge { from: j, to: i, matrix: backward });
        }
    }
    PolymatrixGame::from_parts(action_counts.to_vec(), kind, edges)
}
