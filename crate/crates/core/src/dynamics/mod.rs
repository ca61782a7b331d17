//! Generalized individual Q-learning.
//!
//! Each agent splits its Q-estimate into a belief-based part `q_check`, built
//! from the realized actions of the opponents it observes, and a payoff-based
//! part `q_hat`, learned from the residual payoff of the interactions it cannot
//! observe. Actions are drawn from the softmax of `q_check + q_hat`.

mod drift;
mod engine;
mod schedule;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::game::{MixedStrategy, PolymatrixGame};
use crate::graph::DirectedGraph;

pub use drift::{monte_carlo_drift, ComponentStats, DriftEstimate};
pub use engine::{agent_stream, AgentState, Engine, EngineCheckpoint, Initialization, StageOutcome};
pub use schedule::{ScheduleParams, StepSchedule};

/// Floor on softmax probabilities, guarding the step-size ratio against underflow.
pub const MIN_PROBABILITY: f64 = 1e-300;

/// Softmax of `q / tau`, evaluated with the maximum subtracted first.
pub fn smoothed_best_response(q: &[f64], tau: f64) -> Result<MixedStrategy> {
    check_tau(tau)?;
    if q.is_empty() {
        return Err(Error::input("empty Q-vector"));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("non-finite Q-vector"));
    }
    let mut out = vec![0.0; q.len()];
    softmax_into(q, tau, &mut out);
    Ok(MixedStrategy::from_raw(out))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::input(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

#[inline]
pub(crate) fn softmax_into(q: &[f64], tau: f64, out: &mut [f64]) {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(q) {
        *o = ((x - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = (*o / total).max(MIN_PROBABILITY);
    }
}

/// Draws an action index with one uniform variate (inverse CDF).
pub fn sample_action<R: Rng + ?Sized>(strategy: &MixedStrategy, rng: &mut R) -> usize {
    sample_from(strategy.probs(), rng)
}

#[inline]
pub(crate) fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = a;
            acc += p;
            if u < acc {
                return a;
            }
        }
    }
    // Round-off can leave the cumulative sum just below u.
    last_positive
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::input(format!("step size {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// `pi + alpha (e_a - pi)`: the weighted empirical average after observing `action`.
pub fn belief_update(belief: &MixedStrategy, action: usize, alpha: f64) -> Result<MixedStrategy> {
    check_alpha(alpha)?;
    if action >= belief.num_actions() {
        return Err(Error::input(format!(
            "observed action {action} out of range ({} actions)",
            belief.num_actions()
        )));
    }
    let mut next = belief.clone();
    belief_update_in_place(next.probs_mut(), action, alpha);
    Ok(next)
}

#[inline]
pub(crate) fn belief_update_in_place(probs: &mut [f64], action: usize, alpha: f64) {
    for (b, p) in probs.iter_mut().enumerate() {
        let target = if b == action { 1.0 } else { 0.0 };
        *p += alpha * (target - *p);
    }
}

/// `u_check(a_i) = sum_{j observed by i} u_ij(a_i, a_j)` for every own action `a_i`.
pub fn observed_payoff_vector(
    game: &PolymatrixGame,
    obs_graph: &DirectedGraph,
    agent: usize,
    observed_actions: &BTreeMap<usize, usize>,
) -> Result<Vec<f64>> {
    let observed = obs_graph.out_neighbors(agent)?;
    if observed.len() != observed_actions.len()
        || observed.iter().zip(observed_actions.keys()).any(|(a, b)| a != b)
    {
        return Err(Error::input(format!(
            "observed actions keyed by {:?}, agent {agent} observes {observed:?}",
            observed_actions.keys().collect::<Vec<_>>()
        )));
    }
    let mut out = vec![0.0; game.num_actions(agent)];
    for (&j, &a) in observed_actions {
        if a >= game.num_actions(j) {
            return Err(Error::input(format!("agent {j} action {a} out of range")));
        }
        if let Some(m) = game.edge(agent, j) {
            m.add_column(a, &mut out);
        }
    }
    Ok(out)
}

/// The part of the realized payoff not explained by observed opponents.
#[inline]
pub fn residual_payoff(realized: f64, observed_at_played: f64) -> f64 {
    realized - observed_at_played
}

/// `min(1, alpha / prob)`: step for the played action's payoff-based estimate.
pub fn normalized_step(alpha: f64, played_prob: f64) -> Result<f64> {
    if !(played_prob > 0.0 && played_prob <= 1.0) {
        return Err(Error::contract(format!(
            "probability of the played action is {played_prob}"
        )));
    }
    check_alpha(alpha)?;
    Ok((alpha / played_prob).min(1.0))
}

/// `q_check += alpha (u_check - q_check)`, every entry at once.
pub fn q_check_update(q_check: &mut [f64], u_check: &[f64], alpha: f64) -> Result<()> {
    if q_check.len() != u_check.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            q_check.len(),
            u_check.len()
        )));
    }
    check_alpha(alpha)?;
    for (q, u) in q_check.iter_mut().zip(u_check) {
        *q += alpha * (u - *q);
    }
    Ok(())
}

/// `q_hat[played] += step (u_hat - q_hat[played])`; other entries are untouched.
pub fn q_hat_update(q_hat: &mut [f64], played: usize, u_hat: f64, step: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&step) {
        return Err(Error::contract(format!("step {step} outside [0, 1]")));
    }
    let q = q_hat
        .get_mut(played)
        .ok_or_else(|| Error::input(format!("played action {played} out of range")))?;
    *q += step * (u_hat - *q);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{Edge, GameKind, PayoffMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let s = smoothed_best_response(&[0.0, 0.0, 0.0], 0.7).unwrap();
        assert!(close(s.probs(), &[1.0 / 3.0; 3], 1e-15));
        let tau = 0.25;
        let s = smoothed_best_response(&[tau * 2f64.ln(), 0.0], tau).unwrap();
        assert!(close(s.probs(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let q = [0.3, -1.2, 0.9];
        let shifted: Vec<f64> = q.iter().map(|x| x + 123.456).collect();
        let a = smoothed_best_response(&q, tau).unwrap();
        let b = smoothed_best_response(&shifted, tau).unwrap();
        assert!(close(a.probs(), b.probs(), 1e-14));
    }

    #[test]
    fn softmax_stays_positive_and_finite() {
        let s = smoothed_best_response(&[1000.0, -1000.0, 0.0], 0.01).unwrap();
        assert!(s.probs().iter().all(|p| *p > 0.0 && p.is_finite()));
        assert!(smoothed_best_response(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(smoothed_best_response(&[0.0, 0.0], 0.0).is_err());
        assert!(smoothed_best_response(&[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pure = MixedStrategy::pure(3, 0).unwrap();
        assert!((0..1000).all(|_| sample_action(&pure, &mut rng) == 0));
        let half = MixedStrategy::uniform(2);
        let draws = 100_000;
        let zeros = (0..draws).filter(|_| sample_action(&half, &mut rng) == 0).count();
        let freq = zeros as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / draws as f64).sqrt(), "{freq}");
        let s = MixedStrategy::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = r1.clone();
        for _ in 0..100 {
            assert_eq!(sample_action(&s, &mut r1), sample_action(&s, &mut r2));
        }
    }

    #[test]
    fn belief_examples() {
        let b = belief_update(&MixedStrategy::pure(2, 0).unwrap(), 1, 0.5).unwrap();
        assert_eq!(b.probs(), &[0.5, 0.5]);
        let b = belief_update(&MixedStrategy::uniform(3), 0, 0.3).unwrap();
        assert!(close(b.probs(), &[0.7 / 3.0 + 0.3, 0.7 / 3.0, 0.7 / 3.0], 1e-15));
        assert!((b.probs()[0] - 0.533_333_333_333_333_3).abs() < 1e-15);
        assert!(belief_update(&MixedStrategy::uniform(3), 0, 1.0).is_err());
        assert!(belief_update(&MixedStrategy::uniform(3), 0, 0.0).is_err());
        assert!(belief_update(&MixedStrategy::uniform(3), 3, 0.5).is_err());
    }

    #[test]
    fn step_examples() {
        assert_eq!(normalized_step(0.25, 0.5).unwrap(), 0.5);
        assert_eq!(normalized_step(0.9, 0.5).unwrap(), 1.0);
        assert!((normalized_step(1e-6, 0.01).unwrap() - 1e-4).abs() < 1e-18);
        assert!(matches!(normalized_step(0.1, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn q_updates() {
        let mut q = vec![1.0, 2.0];
        q_check_update(&mut q, &[1.0, 2.0], 0.3).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        let mut q = vec![0.0, 0.0];
        q_check_update(&mut q, &[2.0, -4.0], 0.5).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
        assert!(q_check_update(&mut q, &[1.0], 0.5).is_err());

        let mut q = vec![0.0, 0.0];
        q_hat_update(&mut q, 0, 2.0, 0.5).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
        q_hat_update(&mut q, 1, 7.0, 0.0).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
        q_hat_update(&mut q, 1, 7.0, 1.0).unwrap();
        assert_eq!(q, vec![1.0, 7.0]);
        assert!(matches!(q_hat_update(&mut q, 0, 1.0, 1.5), Err(Error::Contract(_))));
    }

    fn three_agent_game() -> PolymatrixGame {
        let m = |rows: Vec<Vec<f64>>| PayoffMatrix::from_rows(rows).unwrap();
        PolymatrixGame::new(
            vec![2, 2, 3],
            GameKind::General,
            vec![
                Edge { from: 0, to: 1, matrix: m(vec![vec![1.0, 2.0], vec![3.0, 4.0]]) },
                Edge { from: 0, to: 2, matrix: m(vec![vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]) },
                Edge { from: 1, to: 0, matrix: m(vec![vec![-1.0, 0.5], vec![0.0, 2.0]]) },
            ],
        )
        .unwrap()
    }

    #[test]
    fn observed_payoffs_and_residuals() {
        let g = three_agent_game();
        let profile = [1usize, 0, 2];
        let empty = DirectedGraph::empty(3);
        let none = BTreeMap::new();
        assert_eq!(observed_payoff_vector(&g, &empty, 0, &none).unwrap(), vec![0.0, 0.0]);

        // Agent 0 observes only agent 2.
        let partial = DirectedGraph::new(3, [(0, 2)]).unwrap();
        let seen = BTreeMap::from([(2, 2)]);
        let u_check = observed_payoff_vector(&g, &partial, 0, &seen).unwrap();
        assert_eq!(u_check, vec![7.0, 10.0]);
        let realized = g.payoff(0, &profile.to_vec().into()).unwrap();
        // Unobserved edge (0,1) at (1,0) is 3.
        assert_eq!(residual_payoff(realized, u_check[profile[0]]), 3.0);

        let full = DirectedGraph::complete(3);
        let seen = BTreeMap::from([(1, 0), (2, 2)]);
        let u_check = observed_payoff_vector(&g, &full, 0, &seen).unwrap();
        assert_eq!(u_check[profile[0]], realized);
        assert_eq!(residual_payoff(realized, u_check[profile[0]]), 0.0);

        assert!(observed_payoff_vector(&g, &full, 0, &BTreeMap::from([(1, 0)])).is_err());
        assert!(observed_payoff_vector(&g, &partial, 0, &BTreeMap::from([(2, 3)])).is_err());
    }
}
