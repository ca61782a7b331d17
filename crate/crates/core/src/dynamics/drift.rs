use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Engine;
use crate::error::{Error, Result};
use crate::game::MixedStrategy;

/// Monte-Carlo estimate of the conditional mean of one stage's increments,
/// divided by the reference step, from a frozen engine state.
///
/// Components mirror the state `(q_check, q_hat, pi)`; `pi` is the analyst's
/// empirical average of every agent's actions (not the agents' beliefs).
#[derive(Clone, Debug, PartialEq)]
pub struct DriftEstimate {
    pub alpha: f64,
    pub samples: usize,
    pub q_check: ComponentStats,
    pub q_hat: ComponentStats,
    pub pi: ComponentStats,
    /// Samples in which some agent's step threshold was active.
    pub threshold_hits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub mean: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
}

/// Welford accumulator over a ragged per-agent array.
struct Running {
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl Running {
    fn new(shape: &[usize]) -> Self {
        Running {
            mean: shape.iter().map(|&m| vec![0.0; m]).collect(),
            m2: shape.iter().map(|&m| vec![0.0; m]).collect(),
        }
    }

    fn push(&mut self, count: usize, i: usize, a: usize, x: f64) {
        let mean = &mut self.mean[i][a];
        let delta = x - *mean;
        *mean += delta / count as f64;
        self.m2[i][a] += delta * (x - *mean);
    }

    fn finish(self, count: usize) -> ComponentStats {
        let denom = (count as f64) * (count.saturating_sub(1).max(1) as f64);
        let std_err = self
            .m2
            .iter()
            .map(|row| row.iter().map(|m2| (m2 / denom).sqrt()).collect())
            .collect();
        ComponentStats {
            mean: self.mean,
            std_err,
        }
    }
}

/// Resamples the next stage `samples` times from `engine`'s current state and
/// averages `(x_{k+1} - x_k) / alpha_k`. Each sample uses fresh streams derived
/// from `seed`; the engine itself is not advanced.
pub fn monte_carlo_drift(
    engine: &Engine,
    pis: &[MixedStrategy],
    samples: usize,
    seed: u64,
) -> Result<DriftEstimate> {
    let game = engine.game();
    let n = game.num_agents();
    if pis.len() != n || pis.iter().zip(game.action_counts()).any(|(p, &m)| p.num_actions() != m) {
        return Err(Error::input("empirical averages do not match the game"));
    }
    if samples < 2 {
        return Err(Error::input("need at least two samples"));
    }
    let alpha = engine.schedule().alpha(engine.stage());
    let shape = game.action_counts();
    let (mut dq_check, mut dq_hat, mut dpi) = (Running::new(shape), Running::new(shape), Running::new(shape));
    let mut threshold_hits = 0;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|_| ChaCha8Rng::seed_from_u64(seed)).collect();
    for s in 0..samples {
        for (i, rng) in rngs.iter_mut().enumerate() {
            rng.set_stream((s * n + i) as u64);
            rng.set_word_pos(0);
        }
        let (outcome, next) = engine.sample_stage(&mut rngs);
        if outcome.threshold_active.iter().any(|&b| b) {
            threshold_hits += 1;
        }
        let count = s + 1;
        for (i, (before, after)) in engine.agents().iter().zip(&next).enumerate() {
            for a in 0..shape[i] {
                dq_check.push(count, i, a, (after.q_check[a] - before.q_check[a]) / alpha);
                dq_hat.push(count, i, a, (after.q_hat[a] - before.q_hat[a]) / alpha);
                let hit = if outcome.actions[i] == a { 1.0 } else { 0.0 };
                dpi.push(count, i, a, hit - pis[i].probs()[a]);
            }
        }
    }
    Ok(DriftEstimate {
        alpha,
        samples,
        q_check: dq_check.finish(samples),
        q_hat: dq_hat.finish(samples),
        pi: dpi.finish(samples),
        threshold_hits,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dynamics::StepSchedule;
    use crate::game::{generate_potential, PayoffRange};
    use crate::graph::DirectedGraph;

    #[test]
    fn does_not_advance_engine_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let game = generate_potential(&[2, 3], PayoffRange::default(), &mut rng).unwrap();
        let engine = Engine::new(
            Arc::new(game),
            Arc::new(DirectedGraph::new(2, [(0, 1)]).unwrap()),
            0.25,
            StepSchedule::default(),
            3,
        )
        .unwrap();
        let pis = vec![MixedStrategy::uniform(2), MixedStrategy::uniform(3)];
        let a = monte_carlo_drift(&engine, &pis, 500, 9).unwrap();
        let b = monte_carlo_drift(&engine, &pis, 500, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(engine.stage(), 0);
        assert!(monte_carlo_drift(&engine, &pis[..1], 500, 9).is_err());
    }
}
