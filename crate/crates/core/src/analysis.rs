//! Equilibrium computation and convergence metrics.
//!
//! All functions here are pure. Profiles are slices with one
//! [`MixedStrategy`] per agent; Q-vectors are the combined estimates
//! `q_check + q_hat`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{check_tau, softmax_into};
use crate::error::{Error, Result};
use crate::game::{entropy, GameKind, MixedStrategy, PolymatrixGame};

/// One mixed strategy per agent.
pub type StrategyProfile = Vec<MixedStrategy>;

/// Weighted empirical average of every agent's realized actions, updated
/// with the common reference step regardless of who observes whom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTracker {
    pis: Vec<MixedStrategy>,
    stage: u64,
}

impl EmpiricalTracker {
    /// Uniform averages for every agent.
    pub fn new(action_counts: &[usize]) -> Self {
        EmpiricalTracker {
            pis: action_counts.iter().map(|&m| MixedStrategy::uniform(m)).collect(),
            stage: 0,
        }
    }

    pub fn profile(&self) -> &[MixedStrategy] {
        &self.pis
    }

    pub fn stage(&self) -> u64 {
        self.stage
    }

    /// `pi_i += alpha (e_{a_i} - pi_i)` for every agent.
    pub fn update(&mut self, actions: &[usize], alpha: f64) -> Result<()> {
        if actions.len() != self.pis.len() {
            return Err(Error::input(format!(
                "{} actions for {} agents",
                actions.len(),
                self.pis.len()
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::input(format!("step size {alpha} outside (0, 1)")));
        }
        if let Some((i, &a)) = actions
            .iter()
            .enumerate()
            .find(|(i, &a)| a >= self.pis[*i].num_actions())
        {
            return Err(Error::input(format!("agent {i} action {a} out of range")));
        }
        for (pi, &a) in self.pis.iter_mut().zip(actions) {
            crate::dynamics::belief_update_in_place(pi.probs_mut(), a, alpha);
        }
        self.stage += 1;
        Ok(())
    }
}

/// Functional form of [`EmpiricalTracker::update`].
pub fn tracker_update(
    mut tracker: EmpiricalTracker,
    actions: &[usize],
    alpha: f64,
) -> Result<EmpiricalTracker> {
    tracker.update(actions, alpha)?;
    Ok(tracker)
}

fn softmax(q: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    softmax_into(q, tau, &mut out);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Agent `i`'s expected payoff `u_i(pi)` under the product distribution.
pub fn expected_payoff(game: &PolymatrixGame, agent: usize, profile: &[MixedStrategy]) -> Result<f64> {
    let v = game.payoff_vector_against(agent, profile)?;
    Ok(profile[agent].expect(&v))
}

/// Sum over agents of `|u_i(pi) - u_i(br_i(u_i(., pi_-i)), pi_-i)|`.
pub fn qre_gap(game: &PolymatrixGame, profile: &[MixedStrategy], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    game.check_profile_strategies(profile)?;
    Ok((0..game.num_agents())
        .map(|i| {
            let v = game.payoff_vector_against_raw(i, |j| profile[j].probs());
            let br = softmax(&v, tau);
            (profile[i].expect(&v) - dot(&br, &v)).abs()
        })
        .sum())
}

/// `max_i || pi_i - br_i(u_i(., pi_-i)) ||_inf`: the fixed-point residual.
pub fn qre_residual(game: &PolymatrixGame, profile: &[MixedStrategy], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    game.check_profile_strategies(profile)?;
    Ok(fixed_point_residual(game, tau, |j| profile[j].probs()))
}

fn fixed_point_residual<'a, F>(game: &PolymatrixGame, tau: f64, strategy_of: F) -> f64
where
    F: Fn(usize) -> &'a [f64] + Copy,
{
    (0..game.num_agents())
        .map(|i| {
            let br = softmax(&game.payoff_vector_against_raw(i, strategy_of), tau);
            strategy_of(i)
                .iter()
                .zip(&br)
                .fold(0.0f64, |m, (p, b)| m.max((p - b).abs()))
        })
        .fold(0.0, f64::max)
}

fn check_q(game: &PolymatrixGame, q_all: &[Vec<f64>]) -> Result<()> {
    if q_all.len() != game.num_agents() {
        return Err(Error::input(format!(
            "{} Q-vectors for {} agents",
            q_all.len(),
            game.num_agents()
        )));
    }
    for (i, q) in q_all.iter().enumerate() {
        if q.len() != game.num_actions(i) {
            return Err(Error::input(format!("Q-vector of agent {i} has wrong length")));
        }
    }
    Ok(())
}

/// `(1/n) sum_i || q_i - u_i(., pi_-i) ||_2`: how far the estimates are from
/// the payoffs against the current empirical play.
pub fn q_diff(game: &PolymatrixGame, q_all: &[Vec<f64>], profile: &[MixedStrategy]) -> Result<f64> {
    check_q(game, q_all)?;
    game.check_profile_strategies(profile)?;
    let n = game.num_agents();
    Ok(tracking_errors(game, q_all, profile).iter().sum::<f64>() / n as f64)
}

/// `|| q_i - u_i(., pi_-i) ||_2` for each agent.
pub(crate) fn tracking_errors(
    game: &PolymatrixGame,
    q_all: &[Vec<f64>],
    profile: &[MixedStrategy],
) -> Vec<f64> {
    (0..game.num_agents())
        .map(|i| norm2(&q_all[i], &game.payoff_vector_against_raw(i, |j| profile[j].probs())))
        .collect()
}

/// Entropy-regularized maximum `max_mu { mu . q + tau H(mu) } = tau log sum exp(q / tau)`.
pub fn smooth_value(q: &[f64], tau: f64) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + tau * q.iter().map(|x| ((x - max) / tau).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QreOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial damping; halved whenever the residual stalls for `patience` iterations.
    pub damping: f64,
    pub patience: usize,
    pub min_damping: f64,
}

impl Default for QreOptions {
    fn default() -> Self {
        QreOptions {
            tol: 1e-10,
            max_iters: 100_000,
            damping: 0.5,
            patience: 20,
            min_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QreSolution {
    pub profile: Vec<MixedStrategy>,
    /// Final fixed-point residual `max_i || pi_i - br_i(u_i(., pi_-i)) ||_inf`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_damping: f64,
}

/// Damped simultaneous fixed-point iteration
/// `pi <- (1 - lambda) pi + lambda br(u(., pi))` from the uniform profile.
///
/// Small temperatures make the undamped map oscillate around the fixed
/// point, so `lambda` is halved (down to `min_damping`) each time the
/// residual goes `patience` iterations without a new best. Failure to reach
/// `tol` is reported in the solution, not as an error.
pub fn solve_qre(game: &PolymatrixGame, tau: f64, opts: &QreOptions) -> Result<QreSolution> {
    check_tau(tau)?;
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::input(format!("tolerance {} must be positive", opts.tol)));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::input(format!("damping {} outside (0, 1]", opts.damping)));
    }
    if !(opts.min_damping > 0.0 && opts.min_damping <= opts.damping) {
        return Err(Error::input("min_damping must lie in (0, damping]"));
    }
    let n = game.num_agents();
    let mut pis: Vec<Vec<f64>> = game
        .action_counts()
        .iter()
        .map(|&m| vec![1.0 / m as f64; m])
        .collect();
    let mut lambda = opts.damping;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations <= opts.max_iters {
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|i| softmax(&game.payoff_vector_against_raw(i, |j| pis[j].as_slice()), tau))
            .collect();
        residual = pis
            .iter()
            .zip(&targets)
            .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if residual < opts.tol || iterations == opts.max_iters {
            break;
        }
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= opts.patience {
                lambda = (lambda * 0.5).max(opts.min_damping);
                stalled = 0;
            }
        }
        for (p, t) in pis.iter_mut().zip(&targets) {
            for (a, b) in p.iter_mut().zip(t) {
                *a += lambda * (b - *a);
            }
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= total);
        }
        iterations += 1;
    }
    Ok(QreSolution {
        profile: pis.into_iter().map(MixedStrategy::from_raw).collect(),
        residual,
        iterations,
        converged: residual < opts.tol,
        final_damping: lambda,
    })
}

/// `L_i(q_i, pi) = smooth_value(q_i) - (u_i(pi) + tau H(pi_i)) + || q_i - u_i(., pi_-i) ||_2`.
///
/// Nonnegative, and zero exactly when `pi_i = br_i(q_i)` and `q_i = u_i(., pi_-i)`.
pub fn lyapunov_term(
    game: &PolymatrixGame,
    agent: usize,
    q: &[f64],
    profile: &[MixedStrategy],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    game.check_profile_strategies(profile)?;
    if agent >= game.num_agents() || q.len() != game.num_actions(agent) {
        return Err(Error::input(format!("bad agent {agent} or Q-vector length")));
    }
    Ok(lyapunov_term_raw(game, agent, q, |j| profile[j].probs(), tau))
}

pub(crate) fn lyapunov_term_raw<'a, F>(
    game: &PolymatrixGame,
    agent: usize,
    q: &[f64],
    strategy_of: F,
    tau: f64,
) -> f64
where
    F: Fn(usize) -> &'a [f64],
{
    let v = game.payoff_vector_against_raw(agent, &strategy_of);
    let own = strategy_of(agent);
    smooth_value(q, tau) - (dot(own, &v) + tau * entropy(own)) + norm2(q, &v)
}

/// `V_z = sum_i L_i(q_i, pi)`, the Lyapunov function for zero-sum games.
pub fn lyapunov_zero_sum(
    game: &PolymatrixGame,
    q_all: &[Vec<f64>],
    profile: &[MixedStrategy],
    tau: f64,
) -> Result<f64> {
    game.require_kind(GameKind::ZeroSum)?;
    check_tau(tau)?;
    check_q(game, q_all)?;
    game.check_profile_strategies(profile)?;
    Ok((0..game.num_agents())
        .map(|i| lyapunov_term_raw(game, i, &q_all[i], |j| profile[j].probs(), tau))
        .sum())
}

/// Expected potential `phi(pi) = 1/2 sum_{(i,j) in E} pi_i^T u_ij pi_j`.
pub fn expected_potential(game: &PolymatrixGame, profile: &[MixedStrategy]) -> Result<f64> {
    game.require_kind(GameKind::Potential)?;
    game.check_profile_strategies(profile)?;
    Ok(expected_potential_raw(game, |j| profile[j].probs()))
}

pub(crate) fn expected_potential_raw<'a, F>(game: &PolymatrixGame, strategy_of: F) -> f64
where
    F: Fn(usize) -> &'a [f64],
{
    0.5 * game
        .edges()
        .map(|(i, j, m)| m.bilinear(strategy_of(i), strategy_of(j)))
        .sum::<f64>()
}

/// `V_p = -phi(pi) - tau sum_i H(pi_i) + 2 sum_i || q_i - u_i(., pi_-i) ||_2`,
/// the Lyapunov function for potential games.
pub fn lyapunov_potential(
    game: &PolymatrixGame,
    q_all: &[Vec<f64>],
    profile: &[MixedStrategy],
    tau: f64,
) -> Result<f64> {
    game.require_kind(GameKind::Potential)?;
    check_tau(tau)?;
    check_q(game, q_all)?;
    game.check_profile_strategies(profile)?;
    Ok(lyapunov_potential_raw(game, q_all, |j| profile[j].probs(), tau))
}

pub(crate) fn lyapunov_potential_raw<'a, F>(
    game: &PolymatrixGame,
    q_all: &[Vec<f64>],
    strategy_of: F,
    tau: f64,
) -> f64
where
    F: Fn(usize) -> &'a [f64] + Copy,
{
    let entropies: f64 = (0..game.num_agents()).map(|i| entropy(strategy_of(i))).sum();
    let tracking: f64 = (0..game.num_agents())
        .map(|i| norm2(&q_all[i], &game.payoff_vector_against_raw(i, strategy_of)))
        .sum();
    -expected_potential_raw(game, strategy_of) - tau * entropies + 2.0 * tracking
}
