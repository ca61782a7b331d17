use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    belief_update_in_place, check_tau, q_check_update, q_hat_update, residual_payoff, sample_from,
    softmax_into, StepSchedule,
};
use crate::error::{Error, Result};
use crate::game::{MixedStrategy, PolymatrixGame};
use crate::graph::DirectedGraph;

/// One agent's learning state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    /// Belief-based estimate of the payoff from observed opponents.
    pub q_check: Vec<f64>,
    /// Payoff-based estimate of the payoff from unobserved opponents.
    pub q_hat: Vec<f64>,
    /// Weighted empirical averages of the observed opponents' actions.
    pub beliefs: BTreeMap<usize, MixedStrategy>,
}

impl AgentState {
    /// `q = q_check + q_hat`.
    pub fn q(&self) -> Vec<f64> {
        self.q_check.iter().zip(&self.q_hat).map(|(a, b)| a + b).collect()
    }

    /// Applies this agent's end-of-stage updates given everybody's actions and
    /// this agent's own realized payoff, softmax, and reference step.
    fn learn(
        &mut self,
        game: &PolymatrixGame,
        agent: usize,
        actions: &[usize],
        realized: f64,
        played_prob: f64,
        alpha: f64,
    ) -> (f64, bool) {
        let played = actions[agent];
        let mut u_check = vec![0.0; self.q_check.len()];
        for (&j, belief) in self.beliefs.iter_mut() {
            if let Some(m) = game.edge(agent, j) {
                m.add_column(actions[j], &mut u_check);
            }
            belief_update_in_place(belief.probs_mut(), actions[j], alpha);
        }
        let u_hat = residual_payoff(realized, u_check[played]);
        let ratio = alpha / played_prob;
        let step = ratio.min(1.0);
        q_check_update(&mut self.q_check, &u_check, alpha).expect("dimensions fixed at construction");
        q_hat_update(&mut self.q_hat, played, u_hat, step).expect("step lies in [0, 1]");
        (step, ratio >= 1.0)
    }
}

/// How estimates and beliefs start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// `q_check = q_hat = 0`, uniform beliefs.
    #[default]
    Zero,
    /// Uniform beliefs, `q_hat = 0`, and `q_check` equal to the expected
    /// observed payoff under those beliefs, so that `q_check` tracks the
    /// beliefs exactly from the first stage on.
    BeliefConsistent,
}

/// Everything that happened in one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: u64,
    pub alpha: f64,
    pub actions: Vec<usize>,
    pub payoffs: Vec<f64>,
    /// The smoothed best responses the actions were drawn from.
    pub strategies: Vec<Vec<f64>>,
    /// Step applied to each agent's payoff-based estimate of the played action.
    pub steps: Vec<f64>,
    /// Whether `min(1, alpha / prob)` clamped to 1 for the agent.
    pub threshold_active: Vec<bool>,
}

/// Per-agent random stream: the trial seed with the agent index as ChaCha stream id.
pub fn agent_stream(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng
}

/// Synchronous repeated play of the learning dynamics on one game.
#[derive(Clone, Debug)]
pub struct Engine {
    game: Arc<PolymatrixGame>,
    obs_graph: Arc<DirectedGraph>,
    tau: f64,
    schedule: StepSchedule,
    agents: Vec<AgentState>,
    stage: u64,
    rngs: Vec<ChaCha8Rng>,
}

impl Engine {
    pub fn new(
        game: Arc<PolymatrixGame>,
        obs_graph: Arc<DirectedGraph>,
        tau: f64,
        schedule: StepSchedule,
        seed: u64,
    ) -> Result<Self> {
        check_tau(tau)?;
        let n = game.num_agents();
        if obs_graph.num_vertices() != n {
            return Err(Error::input(format!(
                "observability graph has {} vertices, game has {n} agents",
                obs_graph.num_vertices()
            )));
        }
        let agents = (0..n)
            .map(|i| AgentState {
                q_check: vec![0.0; game.num_actions(i)],
                q_hat: vec![0.0; game.num_actions(i)],
                beliefs: obs_graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, MixedStrategy::uniform(game.num_actions(j))))
                    .collect(),
            })
            .collect();
        let rngs = (0..n).map(|i| agent_stream(seed, i)).collect();
        Ok(Engine {
            game,
            obs_graph,
            tau,
            schedule,
            agents,
            stage: 0,
            rngs,
        })
    }

    pub fn with_initialization(mut self, init: Initialization) -> Self {
        if init == Initialization::BeliefConsistent {
            for (i, agent) in self.agents.iter_mut().enumerate() {
                let mut q = vec![0.0; agent.q_check.len()];
                for (&j, belief) in &agent.beliefs {
                    if let Some(m) = self.game.edge(i, j) {
                        m.add_weighted_columns(belief.probs(), &mut q);
                    }
                }
                agent.q_check = q;
            }
        }
        self
    }

    /// Overrides one agent's estimates. Nonzero starting values void the
    /// a-priori bound on the estimates.
    pub fn set_estimates(&mut self, agent: usize, q_check: Vec<f64>, q_hat: Vec<f64>) -> Result<()> {
        let m = self
            .game
            .action_counts()
            .get(agent)
            .copied()
            .ok_or_else(|| Error::input(format!("agent {agent} out of range")))?;
        if q_check.len() != m || q_hat.len() != m {
            return Err(Error::input(format!("estimates for agent {agent} need {m} entries")));
        }
        if q_check.iter().chain(&q_hat).any(|x| !x.is_finite()) {
            return Err(Error::input("non-finite estimates"));
        }
        self.agents[agent].q_check = q_check;
        self.agents[agent].q_hat = q_hat;
        Ok(())
    }

    pub fn set_belief(&mut self, agent: usize, about: usize, belief: MixedStrategy) -> Result<()> {
        let slot = self
            .agents
            .get_mut(agent)
            .and_then(|a| a.beliefs.get_mut(&about))
            .ok_or_else(|| Error::input(format!("agent {agent} does not observe {about}")))?;
        if slot.num_actions() != belief.num_actions() {
            return Err(Error::input("belief dimension mismatch"));
        }
        *slot = belief;
        Ok(())
    }

    pub fn game(&self) -> &Arc<PolymatrixGame> {
        &self.game
    }

    pub fn obs_graph(&self) -> &Arc<DirectedGraph> {
        &self.obs_graph
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    /// Number of stages played so far.
    pub fn stage(&self) -> u64 {
        self.stage
    }

    pub fn q_all(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(AgentState::q).collect()
    }

    /// The smoothed best responses agents would play at the next stage.
    pub fn current_strategies(&self) -> Vec<MixedStrategy> {
        self.agents
            .iter()
            .map(|a| {
                let mut p = vec![0.0; a.q_check.len()];
                softmax_into(&a.q(), self.tau, &mut p);
                MixedStrategy::from_raw(p)
            })
            .collect()
    }

    /// Plays one simultaneous stage.
    pub fn step(&mut self) -> StageOutcome {
        let n = self.agents.len();
        let alpha = self.schedule.alpha(self.stage);
        let (outcome, next) = play_stage(
            &self.game,
            self.tau,
            alpha,
            self.stage,
            &self.agents,
            &mut self.rngs,
            (0..n).collect::<Vec<_>>().as_slice(),
        );
        self.agents = next;
        self.stage += 1;
        outcome
    }

    /// Plays one stage, visiting agents in `order` (a permutation of the
    /// agents). The outcome does not depend on the order.
    pub fn step_in_order(&mut self, order: &[usize]) -> Result<StageOutcome> {
        let n = self.agents.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::input(format!("{order:?} is not a permutation of 0..{n}")));
        }
        let alpha = self.schedule.alpha(self.stage);
        let (outcome, next) = play_stage(
            &self.game,
            self.tau,
            alpha,
            self.stage,
            &self.agents,
            &mut self.rngs,
            order,
        );
        self.agents = next;
        self.stage += 1;
        Ok(outcome)
    }

    /// Plays `num_stages` stages, calling `observer` after each one.
    pub fn run<F>(&mut self, num_stages: u64, mut observer: F)
    where
        F: FnMut(&Engine, &StageOutcome),
    {
        for _ in 0..num_stages {
            let outcome = self.step();
            observer(self, &outcome);
        }
    }

    /// Plays one stage from the current state with caller-supplied streams,
    /// without touching the engine.
    pub(crate) fn sample_stage(&self, rngs: &mut [ChaCha8Rng]) -> (StageOutcome, Vec<AgentState>) {
        let order: Vec<usize> = (0..self.agents.len()).collect();
        play_stage(
            &self.game,
            self.tau,
            self.schedule.alpha(self.stage),
            self.stage,
            &self.agents,
            rngs,
            &order,
        )
    }

    pub fn checkpoint(&self) -> EngineCheckpoint {
        EngineCheckpoint {
            game: (*self.game).clone(),
            obs_graph: (*self.obs_graph).clone(),
            tau: self.tau,
            schedule: self.schedule,
            agents: self.agents.clone(),
            stage: self.stage,
            rngs: self.rngs.clone(),
        }
    }

    pub fn from_checkpoint(cp: EngineCheckpoint) -> Result<Self> {
        check_tau(cp.tau)?;
        let n = cp.game.num_agents();
        if cp.obs_graph.num_vertices() != n || cp.agents.len() != n || cp.rngs.len() != n {
            return Err(Error::input("checkpoint sizes disagree with the game"));
        }
        for (i, a) in cp.agents.iter().enumerate() {
            let m = cp.game.num_actions(i);
            if a.q_check.len() != m || a.q_hat.len() != m {
                return Err(Error::input(format!("agent {i} estimates have wrong size")));
            }
            if !a.beliefs.keys().copied().eq(cp.obs_graph.neighbors(i).iter().copied()) {
                return Err(Error::input(format!(
                    "agent {i} beliefs are not keyed by its observed agents"
                )));
            }
            if a.beliefs.iter().any(|(&j, b)| b.num_actions() != cp.game.num_actions(j)) {
                return Err(Error::input(format!("agent {i} belief dimension mismatch")));
            }
        }
        Ok(Engine {
            game: Arc::new(cp.game),
            obs_graph: Arc::new(cp.obs_graph),
            tau: cp.tau,
            schedule: cp.schedule,
            agents: cp.agents,
            stage: cp.stage,
            rngs: cp.rngs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.checkpoint()).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Serialized engine, including the position of every agent's random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineCheckpoint {
    pub game: PolymatrixGame,
    pub obs_graph: DirectedGraph,
    pub tau: f64,
    pub schedule: StepSchedule,
    pub agents: Vec<AgentState>,
    pub stage: u64,
    pub rngs: Vec<ChaCha8Rng>,
}

fn play_stage(
    game: &PolymatrixGame,
    tau: f64,
    alpha: f64,
    stage: u64,
    agents: &[AgentState],
    rngs: &mut [ChaCha8Rng],
    order: &[usize],
) -> (StageOutcome, Vec<AgentState>) {
    let n = agents.len();
    let mut strategies: Vec<Vec<f64>> = agents.iter().map(|a| vec![0.0; a.q_check.len()]).collect();
    let mut actions = vec![0usize; n];
    for &i in order {
        softmax_into(&agents[i].q(), tau, &mut strategies[i]);
        actions[i] = sample_from(&strategies[i], &mut rngs[i]);
    }
    let payoffs: Vec<f64> = (0..n).map(|i| game.payoff_unchecked(i, &actions)).collect();
    let mut next = agents.to_vec();
    let mut steps = vec![0.0; n];
    let mut threshold_active = vec![false; n];
    for &i in order {
        let played_prob = strategies[i][actions[i]];
        let (step, clamped) = next[i].learn(game, i, &actions, payoffs[i], played_prob, alpha);
        steps[i] = step;
        threshold_active[i] = clamped;
    }
    let outcome = StageOutcome {
        stage,
        alpha,
        actions,
        payoffs,
        strategies,
        steps,
        threshold_active,
    };
    (outcome, next)
}
