use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1` when a strategy is constructed from user data.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector over one agent's actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixedStrategy(Vec<f64>);

impl MixedStrategy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("mixed strategy over an empty action set"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::input(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(MixedStrategy(probs))
    }

    pub fn uniform(num_actions: usize) -> Self {
        assert!(num_actions > 0, "uniform strategy over an empty action set");
        MixedStrategy(vec![1.0 / num_actions as f64; num_actions])
    }

    /// The degenerate strategy playing `action` with probability one.
    pub fn pure(num_actions: usize, action: usize) -> Result<Self> {
        if action >= num_actions {
            return Err(Error::input(format!(
                "action {action} out of range for {num_actions} actions"
            )));
        }
        let mut probs = vec![0.0; num_actions];
        probs[action] = 1.0;
        Ok(MixedStrategy(probs))
    }

    /// Wraps a vector the caller already knows lies on the simplex.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        MixedStrategy(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn num_actions(&self) -> usize {
        self.0.len()
    }

    /// Expectation of `values` under this strategy.
    pub fn expect(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.0.len());
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for MixedStrategy {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        MixedStrategy::new(probs)
    }
}

impl From<MixedStrategy> for Vec<f64> {
    fn from(s: MixedStrategy) -> Self {
        s.0
    }
}

impl AsRef<[f64]> for MixedStrategy {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
