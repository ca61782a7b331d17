//! The continuous-time flow that the learning dynamics track, with
//! fixed-step integrators and Lyapunov descent checks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{lyapunov_potential_raw, lyapunov_term_raw};
use crate::dynamics::{check_tau, softmax_into};
use crate::error::{Error, Result};
use crate::game::{GameKind, MixedStrategy, PolymatrixGame};
use crate::graph::DirectedGraph;

/// A point `(q_check, q_hat, pi)` of the flow's state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub q_check: Vec<Vec<f64>>,
    pub q_hat: Vec<Vec<f64>>,
    pub pi: Vec<MixedStrategy>,
}

impl FlowState {
    /// Estimates split between observed and unobserved neighbors so that
    /// `q_check + q_hat = u_i(., pi_-i)` holds exactly for every agent.
    pub fn rest_point(game: &PolymatrixGame, graph: &DirectedGraph, profile: &[MixedStrategy]) -> Result<Self> {
        check_graph(game, graph)?;
        game.check_profile_strategies(profile)?;
        let n = game.num_agents();
        let mut q_check: Vec<Vec<f64>> = game.action_counts().iter().map(|&m| vec![0.0; m]).collect();
        let mut q_hat = q_check.clone();
        for i in 0..n {
            for (j, m) in game.incident(i) {
                let target = if graph.contains(i, *j) { &mut q_check[i] } else { &mut q_hat[i] };
                m.add_weighted_columns(profile[*j].probs(), target);
            }
        }
        Ok(FlowState {
            q_check,
            q_hat,
            pi: profile.to_vec(),
        })
    }

    /// Estimates uniform on `[-q_bound, q_bound)` and `pi` uniform on the simplex.
    pub fn random<R: Rng + ?Sized>(action_counts: &[usize], q_bound: f64, rng: &mut R) -> Self {
        let mut draw_q = |m: usize| -> Vec<f64> { (0..m).map(|_| rng.random_range(-q_bound..q_bound)).collect() };
        let q_check: Vec<Vec<f64>> = action_counts.iter().map(|&m| draw_q(m)).collect();
        let q_hat: Vec<Vec<f64>> = action_counts.iter().map(|&m| draw_q(m)).collect();
        let pi = action_counts
            .iter()
            .map(|&m| {
                let raw: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let total: f64 = raw.iter().sum();
                MixedStrategy::from_raw(raw.into_iter().map(|x| x / total).collect())
            })
            .collect();
        FlowState { q_check, q_hat, pi }
    }

    pub fn num_agents(&self) -> usize {
        self.pi.len()
    }

    /// `q_check_i + q_hat_i`.
    pub fn q(&self, agent: usize) -> Vec<f64> {
        self.q_check[agent].iter().zip(&self.q_hat[agent]).map(|(a, b)| a + b).collect()
    }

    pub fn q_all(&self) -> Vec<Vec<f64>> {
        (0..self.num_agents()).map(|i| self.q(i)).collect()
    }

    fn check(&self, game: &PolymatrixGame) -> Result<()> {
        let counts = game.action_counts();
        let ok = [self.q_check.len(), self.q_hat.len(), self.pi.len()].iter().all(|&l| l == counts.len())
            && counts.iter().enumerate().all(|(i, &m)| {
                self.q_check[i].len() == m && self.q_hat[i].len() == m && self.pi[i].num_actions() == m
            });
        if !ok {
            return Err(Error::input("flow state dimensions do not match the game"));
        }
        Ok(())
    }
}

/// The derivative has the same shape as the state, but its `pi` part is a
/// tangent vector (sums to zero), so it is stored as raw rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDerivative {
    pub q_check: Vec<Vec<f64>>,
    pub q_hat: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
}

fn check_graph(game: &PolymatrixGame, graph: &DirectedGraph) -> Result<()> {
    if graph.num_vertices() != game.num_agents() {
        return Err(Error::input(format!(
            "observation graph has {} vertices, game has {} agents",
            graph.num_vertices(),
            game.num_agents()
        )));
    }
    Ok(())
}

/// Flat storage: agent `i` owns `[q_check_i | q_hat_i | pi_i]` at `offsets[i]`.
struct Layout {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    br_offsets: Vec<usize>,
    len: usize,
    actions: usize,
}

impl Layout {
    fn new(counts: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(counts.len());
        let mut br_offsets = Vec::with_capacity(counts.len());
        let (mut len, mut actions) = (0, 0);
        for &m in counts {
            offsets.push(len);
            br_offsets.push(actions);
            len += 3 * m;
            actions += m;
        }
        Layout {
            counts: counts.to_vec(),
            offsets,
            br_offsets,
            len,
            actions,
        }
    }

    fn pack(&self, s: &FlowState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len);
        for i in 0..self.counts.len() {
            x.extend_from_slice(&s.q_check[i]);
            x.extend_from_slice(&s.q_hat[i]);
            x.extend_from_slice(s.pi[i].probs());
        }
        x
    }

    fn blocks<'a>(&self, x: &'a [f64], i: usize) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (o, m) = (self.offsets[i], self.counts[i]);
        (&x[o..o + m], &x[o + m..o + 2 * m], &x[o + 2 * m..o + 3 * m])
    }

    fn unpack(&self, x: &[f64]) -> FlowState {
        let n = self.counts.len();
        let mut s = FlowState {
            q_check: Vec::with_capacity(n),
            q_hat: Vec::with_capacity(n),
            pi: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (qc, qh, pi) = self.blocks(x, i);
            s.q_check.push(qc.to_vec());
            s.q_hat.push(qh.to_vec());
            s.pi.push(MixedStrategy::from_raw(pi.to_vec()));
        }
        s
    }
}

/// Evaluates the field at `x` into `out`, using `br` as scratch.
#[allow(clippy::too_many_arguments)]
fn field(
    game: &PolymatrixGame,
    graph: &DirectedGraph,
    tau: f64,
    layout: &Layout,
    x: &[f64],
    out: &mut [f64],
    br: &mut [f64],
    q: &mut Vec<f64>,
) {
    for (j, &m) in layout.counts.iter().enumerate() {
        let (qc, qh, _) = layout.blocks(x, j);
        q.clear();
        q.extend(qc.iter().zip(qh).map(|(a, b)| a + b));
        let b = layout.br_offsets[j];
        softmax_into(q, tau, &mut br[b..b + m]);
    }
    for (i, &m) in layout.counts.iter().enumerate() {
        let o = layout.offsets[i];
        let (qc, qh, pi) = layout.blocks(x, i);
        let b = layout.br_offsets[i];
        for a in 0..m {
            out[o + a] = -qc[a];
            out[o + m + a] = -qh[a];
            out[o + 2 * m + a] = br[b + a] - pi[a];
        }
        for (j, mat) in game.incident(i) {
            let bj = layout.br_offsets[*j];
            let weights = &br[bj..bj + layout.counts[*j]];
            let target = if graph.contains(i, *j) { o } else { o + m };
            mat.add_weighted_columns(weights, &mut out[target..target + m]);
        }
    }
}

/// The limiting flow at `state`:
/// `q_check' = sum_{observed j} u_ij(., br_j) - q_check`,
/// `q_hat' = sum_{unobserved j} u_ij(., br_j) - q_hat`,
/// `pi' = br - pi`, with `br_j = br(q_check_j + q_hat_j)`.
pub fn vector_field(
    state: &FlowState,
    game: &PolymatrixGame,
    graph: &DirectedGraph,
    tau: f64,
) -> Result<FlowDerivative> {
    check_tau(tau)?;
    check_graph(game, graph)?;
    state.check(game)?;
    let layout = Layout::new(game.action_counts());
    let x = layout.pack(state);
    let mut out = vec![0.0; layout.len];
    let mut br = vec![0.0; layout.actions];
    field(game, graph, tau, &layout, &x, &mut out, &mut br, &mut Vec::new());
    let mut d = FlowDerivative {
        q_check: Vec::new(),
        q_hat: Vec::new(),
        pi: Vec::new(),
    };
    for i in 0..game.num_agents() {
        let (qc, qh, pi) = layout.blocks(&out, i);
        d.q_check.push(qc.to_vec());
        d.q_hat.push(qh.to_vec());
        d.pi.push(pi.to_vec());
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::input(format!("unknown integration method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateOptions {
    pub step: f64,
    pub t_end: f64,
    pub method: Method,
    /// Record every `sample_every`-th step; the first and last states are always kept.
    pub sample_every: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            step: 1e-3,
            t_end: 50.0,
            method: Method::Rk4,
            sample_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FlowState>,
    /// Largest correction applied when projecting `pi` back onto the simplex,
    /// measured as the l1 distance moved.
    pub max_projection: f64,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("a trajectory holds at least its initial state")
    }
}

fn project_simplex(layout: &Layout, x: &mut [f64]) -> f64 {
    let mut moved = 0.0f64;
    for (i, &m) in layout.counts.iter().enumerate() {
        let o = layout.offsets[i] + 2 * m;
        let pi = &mut x[o..o + m];
        let mut clipped = 0.0;
        for p in pi.iter_mut() {
            if *p < 0.0 {
                clipped -= *p;
                *p = 0.0;
            }
        }
        let total: f64 = pi.iter().sum();
        let mut shift = 0.0;
        for p in pi.iter_mut() {
            let new = *p / total;
            shift += (new - *p).abs();
            *p = new;
        }
        moved = moved.max(clipped + shift);
    }
    moved
}

fn first_non_finite(layout: &Layout, x: &[f64]) -> Option<String> {
    let k = x.iter().position(|v| !v.is_finite())?;
    let i = layout.offsets.iter().rposition(|&o| o <= k).unwrap_or(0);
    let within = k - layout.offsets[i];
    let m = layout.counts[i];
    let part = ["q_check", "q_hat", "pi"][within / m];
    Some(format!("agent {i} {part}[{}] = {}", within % m, x[k]))
}

/// Fixed-step integration from `state0` up to `t_end`. The final step is
/// shortened when `t_end` is not a multiple of the step.
pub fn integrate(
    state0: &FlowState,
    game: &PolymatrixGame,
    graph: &DirectedGraph,
    tau: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    check_tau(tau)?;
    check_graph(game, graph)?;
    state0.check(game)?;
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::input(format!("step {} must be positive", opts.step)));
    }
    if !(opts.t_end >= 0.0 && opts.t_end.is_finite()) {
        return Err(Error::input(format!("end time {} must be nonnegative", opts.t_end)));
    }
    if opts.sample_every == 0 {
        return Err(Error::input("sample_every must be positive"));
    }
    let layout = Layout::new(game.action_counts());
    let mut x = layout.pack(state0);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![state0.clone()],
        max_projection: 0.0,
    };
    let full_steps = (opts.t_end / opts.step * (1.0 + 1e-12)).floor() as u64;
    let remainder = opts.t_end - full_steps as f64 * opts.step;
    let total_steps = full_steps + u64::from(remainder > 1e-12 * opts.step.max(opts.t_end));

    let len = layout.len;
    let mut k = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let mut tmp = vec![0.0; len];
    let mut br = vec![0.0; layout.actions];
    let mut q = Vec::new();
    for s in 0..total_steps {
        let h = if s < full_steps { opts.step } else { remainder };
        let mut eval = |x: &[f64], out: &mut [f64]| field(game, graph, tau, &layout, x, out, &mut br, &mut q);
        match opts.method {
            Method::Euler => {
                eval(&x, &mut k[0]);
                x.iter_mut().zip(&k[0]).for_each(|(xi, d)| *xi += h * d);
            }
            Method::Rk4 => {
                let [k1, k2, k3, k4] = &mut k;
                eval(&x, k1);
                tmp.iter_mut().zip(&x).zip(k1.iter()).for_each(|((t, xi), d)| *t = xi + 0.5 * h * d);
                eval(&tmp, k2);
                tmp.iter_mut().zip(&x).zip(k2.iter()).for_each(|((t, xi), d)| *t = xi + 0.5 * h * d);
                eval(&tmp, k3);
                tmp.iter_mut().zip(&x).zip(k3.iter()).for_each(|((t, xi), d)| *t = xi + h * d);
                eval(&tmp, k4);
                for (idx, xi) in x.iter_mut().enumerate() {
                    *xi += h / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
                }
            }
        }
        let t = if s + 1 == total_steps { opts.t_end } else { (s + 1) as f64 * opts.step };
        if let Some(reason) = first_non_finite(&layout, &x) {
            return Err(Error::Integration { time: t, reason });
        }
        traj.max_projection = traj.max_projection.max(project_simplex(&layout, &mut x));
        if (s + 1) % opts.sample_every as u64 == 0 || s + 1 == total_steps {
            traj.times.push(t);
            traj.states.push(layout.unpack(&x));
        }
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovKind {
    /// `V_z`, for zero-sum games.
    ZeroSum,
    /// `V_p`, for potential games.
    Potential,
}

impl LyapunovKind {
    pub fn for_game(kind: GameKind) -> Option<Self> {
        match kind {
            GameKind::ZeroSum => Some(LyapunovKind::ZeroSum),
            GameKind::Potential => Some(LyapunovKind::Potential),
            GameKind::General => None,
        }
    }

    fn game_kind(self) -> GameKind {
        match self {
            LyapunovKind::ZeroSum => GameKind::ZeroSum,
            LyapunovKind::Potential => GameKind::Potential,
        }
    }
}

/// Relative tolerance for one forward difference of `V`.
pub const DESCENT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub kind: LyapunovKind,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Per sample and agent, `|| pi_i - br_i(q_i) ||_inf`.
    pub fixed_point_residuals: Vec<Vec<f64>>,
    /// Largest `V(t_{k+1}) - V(t_k)`; negative when `V` strictly decreased throughout.
    pub max_increase: f64,
    /// Samples whose forward difference exceeded `DESCENT_TOL * max(1, |V|)`.
    pub violations: usize,
    pub final_value: f64,
    /// `max_i || pi_i - br_i(q_i) ||_inf` at the last sample.
    pub final_fixed_point_residual: f64,
    /// `max_i || q_i - u_i(., pi_-i) ||_2` at the last sample.
    pub final_tracking_error: f64,
    pub passed: bool,
}

/// Evaluates the Lyapunov function along `trajectory` and checks it never
/// increases beyond round-off.
pub fn check_lyapunov_descent(
    trajectory: &Trajectory,
    game: &PolymatrixGame,
    tau: f64,
    which: LyapunovKind,
) -> Result<DescentReport> {
    game.require_kind(which.game_kind())?;
    check_tau(tau)?;
    for s in &trajectory.states {
        s.check(game)?;
    }
    let n = game.num_agents();
    let mut values = Vec::with_capacity(trajectory.states.len());
    let mut residuals = Vec::with_capacity(trajectory.states.len());
    for s in &trajectory.states {
        let q_all = s.q_all();
        let strategy_of = |j: usize| s.pi[j].probs();
        values.push(match which {
            LyapunovKind::ZeroSum => (0..n)
                .map(|i| lyapunov_term_raw(game, i, &q_all[i], strategy_of, tau))
                .sum(),
            LyapunovKind::Potential => lyapunov_potential_raw(game, &q_all, strategy_of, tau),
        });
        residuals.push(
            (0..n)
                .map(|i| {
                    let mut br = vec![0.0; q_all[i].len()];
                    softmax_into(&q_all[i], tau, &mut br);
                    br.iter().zip(s.pi[i].probs()).fold(0.0f64, |m, (b, p)| m.max((b - p).abs()))
                })
                .collect::<Vec<f64>>(),
        );
    }
    let mut max_increase = f64::NEG_INFINITY;
    let mut violations = 0;
    for w in values.windows(2) {
        let inc = w[1] - w[0];
        max_increase = max_increase.max(inc);
        if inc > DESCENT_TOL * w[0].abs().max(1.0) {
            violations += 1;
        }
    }
    if values.len() < 2 {
        max_increase = 0.0;
    }
    let last = trajectory.last();
    let q_last = last.q_all();
    let final_tracking_error = (0..n)
        .map(|i| {
            let v = game.payoff_vector_against_raw(i, |j| last.pi[j].probs());
            q_last[i].iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    Ok(DescentReport {
        kind: which,
        times: trajectory.times.clone(),
        final_value: *values.last().expect("nonempty trajectory"),
        final_fixed_point_residual: residuals.last().expect("nonempty trajectory").iter().copied().fold(0.0, f64::max),
        fixed_point_residuals: residuals,
        values,
        max_increase,
        violations,
        final_tracking_error,
        passed: violations == 0,
    })
}

impl DescentReport {
    /// Columns `time,V,residual_0,...,residual_{n-1}`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.fixed_point_residuals.first().map_or(0, Vec::len);
        let mut header = vec!["time".to_string(), "V".to_string()];
        header.extend((0..n).map(|i| format!("residual_{i}")));
        w.write_record(&header)?;
        for ((t, v), r) in self.times.iter().zip(&self.values).zip(&self.fixed_point_residuals) {
            let mut row = vec![format!("{t:.16e}"), format!("{v:.16e}")];
            row.extend(r.iter().map(|x| format!("{x:.16e}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
