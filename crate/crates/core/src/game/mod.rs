//! Polymatrix games: payoffs that decompose into a sum of pairwise matrix
//! games over a directed interaction graph.
//!
//! Agent `i`'s payoff at a joint action `a` is `sum_{j : (i,j) in E} u_ij(a_i, a_j)`.
//! Pairs without an edge contribute nothing, and no zero matrices are stored
//! for them.

mod file;
mod generate;
mod strategy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use file::{EdgeRecord, GameFile};
pub use generate::{generate_potential, generate_zero_sum, PayoffRange};
pub use strategy::{MixedStrategy, SIMPLEX_TOL};

pub use strategy::entropy;

/// Above this many joint profiles, invariant scans sample instead of enumerating.
pub const EXHAUSTIVE_SCAN_LIMIT: usize = 10_000;

/// Absolute tolerance of the zero-sum and potential identities, scaled by
/// `max(1, largest attainable |payoff|)`.
pub const KIND_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameKind {
    ZeroSum,
    Potential,
    General,
}

impl std::fmt::Display for GameKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GameKind::ZeroSum => "zero_sum",
            GameKind::Potential => "potential",
            GameKind::General => "general",
        })
    }
}

impl std::str::FromStr for GameKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_sum" | "zero-sum" => Ok(GameKind::ZeroSum),
            "potential" => Ok(GameKind::Potential),
            "general" => Ok(GameKind::General),
            other => Err(Error::input(format!("unknown game kind `{other}`"))),
        }
    }
}

/// Dense row-major payoff matrix of one edge; rows index the edge source's actions.
#[derive(Clone, Debug, PartialEq)]
pub struct PayoffMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PayoffMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("payoff matrix must be non-empty"));
        }
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "payoff matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("payoff matrix has non-finite entries"));
        }
        Ok(PayoffMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::input("ragged payoff matrix"));
        }
        PayoffMatrix::new(nrows, ncols, rows.into_iter().flatten().collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        PayoffMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> PayoffMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        PayoffMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn scaled(&self, factor: f64) -> PayoffMatrix {
        PayoffMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// `out[r] += sum_c M[r][c] * weights[c]`.
    #[inline]
    pub(crate) fn add_weighted_columns(&self, weights: &[f64], out: &mut [f64]) {
        debug_assert_eq!(weights.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += row.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>();
        }
    }

    /// `out[r] += M[r][col]`.
    #[inline]
    pub(crate) fn add_column(&self, col: usize, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.get(r, col);
        }
    }

    pub fn bilinear(&self, left: &[f64], right: &[f64]) -> f64 {
        left.iter()
            .zip(self.data.chunks_exact(self.cols))
            .map(|(l, row)| l * row.iter().zip(right).map(|(m, r)| m * r).sum::<f64>())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One directed interaction edge `(from, to)` with payoff `u_{from,to}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub matrix: PayoffMatrix,
}

/// A joint action: entry `i` is agent `i`'s action index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionProfile(pub Vec<usize>);

impl ActionProfile {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for ActionProfile {
    fn from(actions: Vec<usize>) -> Self {
        ActionProfile(actions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameFile", into = "GameFile")]
pub struct PolymatrixGame {
    action_counts: Vec<usize>,
    kind: GameKind,
    /// `incident[i]` holds `(j, u_ij)` for every edge `(i, j)`, sorted by `j`.
    incident: Vec<Vec<(usize, PayoffMatrix)>>,
}

impl PolymatrixGame {
    /// Builds a game and checks every structural invariant plus the identity
    /// implied by `kind`.
    pub fn new(action_counts: Vec<usize>, kind: GameKind, edges: Vec<Edge>) -> Result<Self> {
        let game = Self::from_parts(action_counts, kind, edges)?;
        game.verify_kind()?;
        Ok(game)
    }

    /// Structural checks only; used by generators whose construction already
    /// guarantees the kind identity.
    pub(crate) fn from_parts(
        action_counts: Vec<usize>,
        kind: GameKind,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let n = action_counts.len();
        if n == 0 {
            return Err(Error::input("a game needs at least one agent"));
        }
        if let Some(i) = action_counts.iter().position(|&m| m == 0) {
            return Err(Error::input(format!("agent {i} has no actions")));
        }
        let mut incident: Vec<Vec<(usize, PayoffMatrix)>> = vec![Vec::new(); n];
        for Edge { from, to, matrix } in edges {
            if from >= n || to >= n {
                return Err(Error::input(format!(
                    "edge ({from},{to}) out of range for {n} agents"
                )));
            }
            if from == to {
                return Err(Error::input(format!("self-edge on agent {from}")));
            }
            if matrix.rows() != action_counts[from] || matrix.cols() != action_counts[to] {
                return Err(Error::input(format!(
                    "edge ({from},{to}) matrix is {}x{}, expected {}x{}",
                    matrix.rows(),
                    matrix.cols(),
                    action_counts[from],
                    action_counts[to]
                )));
            }
            if incident[from].iter().any(|(j, _)| *j == to) {
                return Err(Error::input(format!("duplicate edge ({from},{to})")));
            }
            incident[from].push((to, matrix));
        }
        for list in &mut incident {
            list.sort_by_key(|(j, _)| *j);
        }
        Ok(PolymatrixGame {
            action_counts,
            kind,
            incident,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn num_actions(&self, agent: usize) -> usize {
        self.action_counts[agent]
    }

    pub fn kind(&self) -> GameKind {
        self.kind
    }

    /// Edges leaving `agent`, sorted by target.
    pub fn incident(&self, agent: usize) -> &[(usize, PayoffMatrix)] {
        &self.incident[agent]
    }

    pub fn edge(&self, from: usize, to: usize) -> Option<&PayoffMatrix> {
        let list = self.incident.get(from)?;
        list.binary_search_by_key(&to, |(j, _)| *j)
            .ok()
            .map(|idx| &list[idx].1)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &PayoffMatrix)> {
        self.incident
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |(j, m)| (i, *j, m)))
    }

    pub fn num_edges(&self) -> usize {
        self.incident.iter().map(Vec::len).sum()
    }

    /// Largest absolute entry over all edge matrices (the per-opponent payoff bound).
    pub fn max_abs_entry(&self) -> f64 {
        self.edges().fold(0.0, |m, (_, _, mat)| m.max(mat.max_abs()))
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.num_agents() {
            return Err(Error::input(format!(
                "agent {agent} out of range for {} agents",
                self.num_agents()
            )));
        }
        Ok(())
    }

    pub fn check_profile(&self, profile: &[usize]) -> Result<()> {
        if profile.len() != self.num_agents() {
            return Err(Error::input(format!(
                "profile has {} actions, game has {} agents",
                profile.len(),
                self.num_agents()
            )));
        }
        for (i, (&a, &m)) in profile.iter().zip(&self.action_counts).enumerate() {
            if a >= m {
                return Err(Error::input(format!(
                    "agent {i} action {a} out of range ({m} actions)"
                )));
            }
        }
        Ok(())
    }

    fn check_strategy(&self, agent: usize, strategy: &MixedStrategy) -> Result<()> {
        if strategy.num_actions() != self.action_counts[agent] {
            return Err(Error::input(format!(
                "strategy for agent {agent} has {} entries, expected {}",
                strategy.num_actions(),
                self.action_counts[agent]
            )));
        }
        Ok(())
    }

    /// Realized payoff of `agent` at a joint action.
    pub fn payoff(&self, agent: usize, profile: &ActionProfile) -> Result<f64> {
        self.check_agent(agent)?;
        self.check_profile(profile.as_slice())?;
        Ok(self.payoff_unchecked(agent, profile.as_slice()))
    }

    #[inline]
    pub(crate) fn payoff_unchecked(&self, agent: usize, profile: &[usize]) -> f64 {
        let own = profile[agent];
        self.incident[agent]
            .iter()
            .map(|(j, m)| m.get(own, profile[*j]))
            .sum()
    }

    /// `u_i(., pi_{-i})` with one strategy per opponent, in increasing agent
    /// order and skipping `agent` itself.
    pub fn expected_payoff_vector(
        &self,
        agent: usize,
        opponents: &[MixedStrategy],
    ) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        let n = self.num_agents();
        if opponents.len() + 1 != n {
            return Err(Error::input(format!(
                "expected {} opponent strategies, got {}",
                n - 1,
                opponents.len()
            )));
        }
        let mut out = vec![0.0; self.action_counts[agent]];
        for (j, m) in &self.incident[agent] {
            let slot = if *j < agent { *j } else { *j - 1 };
            let s = &opponents[slot];
            self.check_strategy(*j, s)?;
            m.add_weighted_columns(s.probs(), &mut out);
        }
        // Strategies of non-neighbours are unused but must still be well-formed.
        for (slot, s) in opponents.iter().enumerate() {
            let j = if slot < agent { slot } else { slot + 1 };
            self.check_strategy(j, s)?;
        }
        Ok(out)
    }

    /// `u_i(., pi_{-i})` read from a full profile (entry `agent` is ignored).
    pub fn payoff_vector_against(&self, agent: usize, profile: &[MixedStrategy]) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        self.check_profile_strategies(profile)?;
        Ok(self.payoff_vector_against_raw(agent, |j| profile[j].probs()))
    }

    /// Same as [`Self::payoff_vector_against`] for raw probability rows.
    pub(crate) fn payoff_vector_against_raw<'a, F>(&self, agent: usize, strategy_of: F) -> Vec<f64>
    where
        F: Fn(usize) -> &'a [f64],
    {
        let mut out = vec![0.0; self.action_counts[agent]];
        for (j, m) in &self.incident[agent] {
            m.add_weighted_columns(strategy_of(*j), &mut out);
        }
        out
    }

    pub(crate) fn check_profile_strategies(&self, profile: &[MixedStrategy]) -> Result<()> {
        if profile.len() != self.num_agents() {
            return Err(Error::input(format!(
                "profile has {} strategies, game has {} agents",
                profile.len(),
                self.num_agents()
            )));
        }
        for (i, s) in profile.iter().enumerate() {
            self.check_strategy(i, s)?;
        }
        Ok(())
    }

    /// `u_ij(., pi_j)`; zero when `(i, j)` is not an edge.
    pub fn pairwise_payoff_vector(
        &self,
        agent: usize,
        other: usize,
        strategy: &MixedStrategy,
    ) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        self.check_agent(other)?;
        self.check_strategy(other, strategy)?;
        let mut out = vec![0.0; self.action_counts[agent]];
        if let Some(m) = self.edge(agent, other) {
            m.add_weighted_columns(strategy.probs(), &mut out);
        }
        Ok(out)
    }

    /// `phi(a) = 1/2 sum_i u_i(a)`, defined for potential games only.
    pub fn potential_value(&self, profile: &ActionProfile) -> Result<f64> {
        self.require_kind(GameKind::Potential)?;
        self.check_profile(profile.as_slice())?;
        Ok(self.half_payoff_sum(profile.as_slice()))
    }

    fn half_payoff_sum(&self, profile: &[usize]) -> f64 {
        0.5 * (0..self.num_agents())
            .map(|i| self.payoff_unchecked(i, profile))
            .sum::<f64>()
    }

    pub(crate) fn require_kind(&self, kind: GameKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::contract(format!(
                "operation requires a {kind} game, got {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn num_profiles(&self) -> Option<usize> {
        self.action_counts
            .iter()
            .try_fold(1usize, |acc, &m| acc.checked_mul(m))
    }

    /// Profiles visited by invariant scans: every profile when there are at
    /// most [`EXHAUSTIVE_SCAN_LIMIT`], otherwise that many seeded random ones.
    pub fn scan_profiles(&self) -> Vec<Vec<usize>> {
        match self.num_profiles() {
            Some(total) if total <= EXHAUSTIVE_SCAN_LIMIT => all_profiles(&self.action_counts),
            _ => {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1_ab1e);
                (0..EXHAUSTIVE_SCAN_LIMIT)
                    .map(|_| {
                        self.action_counts
                            .iter()
                            .map(|&m| rng.random_range(0..m))
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn kind_tolerance(&self) -> f64 {
        let bound: f64 = self
            .incident
            .iter()
            .map(|l| l.iter().map(|(_, m)| m.max_abs()).sum::<f64>())
            .sum();
        KIND_TOL * bound.max(1.0)
    }

    /// Verifies the zero-sum or potential identity on the scan set.
    pub fn verify_kind(&self) -> Result<()> {
        match self.kind {
            GameKind::General => Ok(()),
            GameKind::ZeroSum => {
                let tol = self.kind_tolerance();
                for profile in self.scan_profiles() {
                    let total: f64 = (0..self.num_agents())
                        .map(|i| self.payoff_unchecked(i, &profile))
                        .sum();
                    if total.abs() >= tol {
                        return Err(Error::input(format!(
                            "not zero-sum: payoffs at {profile:?} sum to {total}"
                        )));
                    }
                }
                Ok(())
            }
            GameKind::Potential => {
                let tol = self.kind_tolerance();
                for profile in self.scan_profiles() {
                    let residual = self.max_potential_residual(&profile);
                    if residual >= tol {
                        return Err(Error::input(format!(
                            "not a potential game with phi = sum(u)/2 at {profile:?} (residual {residual})"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Largest violation of the potential identity over unilateral deviations from `profile`.
    pub(crate) fn max_potential_residual(&self, profile: &[usize]) -> f64 {
        let phi = self.half_payoff_sum(profile);
        let mut dev = profile.to_vec();
        let mut worst = 0.0f64;
        for i in 0..self.num_agents() {
            let u = self.payoff_unchecked(i, profile);
            for alt in 0..self.action_counts[i] {
                dev[i] = alt;
                let lhs = self.half_payoff_sum(&dev) - phi;
                let rhs = self.payoff_unchecked(i, &dev) - u;
                worst = worst.max((lhs - rhs).abs());
            }
            dev[i] = profile[i];
        }
        worst
    }
}

/// Every joint profile, last agent varying fastest.
pub fn all_profiles(action_counts: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = action_counts.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0usize; action_counts.len()];
    if action_counts.contains(&0) {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut pos = action_counts.len();
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < action_counts[pos] {
                break;
            }
            cur[pos] = 0;
        }
    }
}
