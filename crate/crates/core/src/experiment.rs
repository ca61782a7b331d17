//! Seeded multi-trial experiments: configuration, orchestration, and CSV
//! output.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{lyapunov_potential, lyapunov_zero_sum, q_diff, qre_gap, EmpiricalTracker};
use crate::dynamics::{Engine, ScheduleParams, StepSchedule};
use crate::error::{Error, Result};
use crate::game::{generate_potential, generate_zero_sum, GameKind, MixedStrategy, PayoffRange, PolymatrixGame};
use crate::graph::DirectedGraph;

/// Environment variable capping the number of worker threads (0 = one per core).
pub const THREADS_ENV: &str = "POLYQ_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game_kind: GameKind,
    pub num_agents: usize,
    pub actions_per_agent: usize,
    pub tau: f64,
    pub p_values: Vec<f64>,
    pub num_trials: usize,
    pub num_stages: u64,
    pub schedule: ScheduleParams,
    pub payoff_range: PayoffRange,
    pub master_seed: u64,
    /// Ratio of the geometric checkpoint grid.
    pub checkpoint_ratio: f64,
    /// Sample undirected observation graphs instead of directed ones.
    pub symmetric_graph: bool,
    /// Use one game for every trial instead of a fresh game per trial index.
    pub fixed_game: bool,
    /// Also record the Lyapunov function matching `game_kind` at each checkpoint.
    pub lyapunov: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            game_kind: GameKind::ZeroSum,
            num_agents: 4,
            actions_per_agent: 3,
            tau: 0.25,
            p_values: vec![0.0, 0.5, 0.75, 1.0],
            num_trials: 50,
            num_stages: 1_000_000,
            schedule: ScheduleParams::default(),
            payoff_range: PayoffRange::default(),
            master_seed: 0,
            checkpoint_ratio: 1.25,
            symmetric_graph: false,
            fixed_game: false,
            lyapunov: false,
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.game_kind == GameKind::General {
            return Err(Error::config("game_kind must be zero_sum or potential"));
        }
        if self.num_agents < 2 {
            return Err(Error::config("num_agents must be at least 2"));
        }
        if self.actions_per_agent == 0 {
            return Err(Error::config("actions_per_agent must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        if self.p_values.is_empty() {
            return Err(Error::config("p_values is empty"));
        }
        if let Some(p) = self.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config(format!("p value {p} outside [0, 1]")));
        }
        let distinct: BTreeSet<u64> = self.p_values.iter().map(|p| p.to_bits()).collect();
        if distinct.len() != self.p_values.len() {
            return Err(Error::config("p_values contains duplicates"));
        }
        if self.num_trials == 0 || self.num_stages == 0 {
            return Err(Error::config("num_trials and num_stages must be positive"));
        }
        StepSchedule::try_from(self.schedule)?;
        self.payoff_range.validate().map_err(|e| Error::config(e.to_string()))?;
        if !(self.checkpoint_ratio > 1.0 && self.checkpoint_ratio.is_finite()) {
            return Err(Error::config(format!(
                "checkpoint_ratio {} must exceed 1",
                self.checkpoint_ratio
            )));
        }
        Ok(())
    }

    pub fn checkpoints(&self) -> Vec<u64> {
        checkpoint_grid(self.num_stages, self.checkpoint_ratio)
    }
}

/// Stages `round(ratio^m)` for `m = 0, 1, ...`, plus every power of ten and
/// the final stage, deduplicated and sorted.
pub fn checkpoint_grid(num_stages: u64, ratio: f64) -> Vec<u64> {
    let mut grid = BTreeSet::new();
    let mut x = 1.0f64;
    while x <= num_stages as f64 {
        grid.insert(x.round() as u64);
        x *= ratio;
    }
    let mut ten = 1u64;
    while ten <= num_stages {
        grid.insert(ten);
        ten = match ten.checked_mul(10) {
            Some(t) => t,
            None => break,
        };
    }
    grid.insert(num_stages);
    grid.into_iter().filter(|&s| s >= 1).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the observation graph and the agents' action streams of one trial.
pub fn trial_seed(master_seed: u64, p: f64, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ p.to_bits()) ^ trial as u64)
}

const GAME_DOMAIN: u64 = 0x6761_6d65;

/// Seed for a trial's game. It does not depend on `p`, so the same trial
/// index plays the same game under every observation probability.
pub fn game_seed(master_seed: u64, trial: usize, fixed_game: bool) -> u64 {
    let index = if fixed_game { 0 } else { trial as u64 + 1 };
    splitmix64(splitmix64(master_seed ^ GAME_DOMAIN) ^ index)
}

const GRAPH_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub stage: u64,
    pub qre_gap: f64,
    pub q_diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub p: f64,
    pub seed: u64,
    pub samples: Vec<MetricSample>,
    pub final_profile: Vec<MixedStrategy>,
}

impl TrialRecord {
    pub fn sample_at(&self, stage: u64) -> Option<&MetricSample> {
        self.samples
            .binary_search_by_key(&stage, |s| s.stage)
            .ok()
            .map(|k| &self.samples[k])
    }
}

/// The game, observation graph, and engine a trial starts from.
pub fn trial_setup(config: &ExperimentConfig, p: f64, trial: usize) -> Result<Engine> {
    config.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("p value {p} outside [0, 1]")));
    }
    let counts = vec![config.actions_per_agent; config.num_agents];
    let mut game_rng = ChaCha8Rng::seed_from_u64(game_seed(config.master_seed, trial, config.fixed_game));
    let game = match config.game_kind {
        GameKind::Potential => generate_potential(&counts, config.payoff_range, &mut game_rng)?,
        _ => generate_zero_sum(&counts, config.payoff_range, &mut game_rng)?,
    };
    let seed = trial_seed(config.master_seed, p, trial);
    let mut graph_rng = ChaCha8Rng::seed_from_u64(seed);
    graph_rng.set_stream(GRAPH_STREAM);
    let graph = if config.symmetric_graph {
        DirectedGraph::erdos_renyi_symmetric(config.num_agents, p, &mut graph_rng)?
    } else {
        DirectedGraph::erdos_renyi(config.num_agents, p, &mut graph_rng)?
    };
    Engine::new(
        Arc::new(game),
        Arc::new(graph),
        config.tau,
        StepSchedule::try_from(config.schedule)?,
        seed,
    )
}

fn measure(game: &PolymatrixGame, config: &ExperimentConfig, engine: &Engine, tracker: &EmpiricalTracker) -> Result<MetricSample> {
    let profile = tracker.profile();
    let q_all = engine.q_all();
    let lyapunov = if config.lyapunov {
        Some(match config.game_kind {
            GameKind::Potential => lyapunov_potential(game, &q_all, profile, config.tau)?,
            _ => lyapunov_zero_sum(game, &q_all, profile, config.tau)?,
        })
    } else {
        None
    };
    let sample = MetricSample {
        stage: engine.stage(),
        qre_gap: qre_gap(game, profile, config.tau)?,
        q_diff: q_diff(game, &q_all, profile)?,
        lyapunov,
    };
    let finite = sample.qre_gap.is_finite() && sample.q_diff.is_finite() && lyapunov.is_none_or(f64::is_finite);
    if !finite {
        return Err(Error::contract(format!("non-finite metric at stage {}", sample.stage)));
    }
    Ok(sample)
}

/// Runs one trial for `num_stages` stages, recording metrics of the
/// empirical averages at every checkpoint.
pub fn run_trial(config: &ExperimentConfig, p: f64, trial: usize) -> Result<TrialRecord> {
    let mut engine = trial_setup(config, p, trial)?;
    let game = Arc::clone(engine.game());
    let mut tracker = EmpiricalTracker::new(game.action_counts());
    let checkpoints = config.checkpoints();
    let mut samples = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    while let Some(&&target) = next.peek() {
        let outcome = engine.step();
        tracker.update(&outcome.actions, outcome.alpha)?;
        if engine.stage() == target {
            samples.push(measure(&game, config, &engine, &tracker)?);
            next.next();
        }
    }
    Ok(TrialRecord {
        trial,
        p,
        seed: trial_seed(config.master_seed, p, trial),
        samples,
        final_profile: tracker.profile().to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    QreGap,
    QDiff,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::QreGap, Metric::QDiff];

    pub fn of(self, sample: &MetricSample) -> f64 {
        match self {
            Metric::QreGap => sample.qre_gap,
            Metric::QDiff => sample.q_diff,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::QreGap => "qre_gap",
            Metric::QDiff => "q_diff",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub p: f64,
    pub stage: u64,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation across trials.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub p: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Per `(p, checkpoint, metric)` mean and standard deviation over the
/// records with that `p`, in the order of `p_values` and `checkpoints`.
pub fn summarize(records: &[TrialRecord], p_values: &[f64], checkpoints: &[u64]) -> Vec<SummaryRow> {
    let mut rows = Vec::with_capacity(p_values.len() * checkpoints.len() * 2);
    for &p in p_values {
        let group: Vec<&TrialRecord> = records.iter().filter(|r| r.p.to_bits() == p.to_bits()).collect();
        if group.is_empty() {
            continue;
        }
        for &stage in checkpoints {
            let samples: Vec<&MetricSample> = group.iter().filter_map(|r| r.sample_at(stage)).collect();
            if samples.is_empty() {
                continue;
            }
            for metric in Metric::ALL {
                let values: Vec<f64> = samples.iter().map(|s| metric.of(s)).collect();
                let count = values.len() as f64;
                let mean = values.iter().sum::<f64>() / count;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                rows.push(SummaryRow {
                    p,
                    stage,
                    metric,
                    mean,
                    std: var.sqrt(),
                });
            }
        }
    }
    rows
}

/// Worker count from `POLYQ_THREADS`; unset, unparsable, or 0 mean one per core.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with_threads(config, threads_from_env())
}

/// Runs every `(p, trial)` pair on a pool of `threads` workers (0 = one per
/// core). Results do not depend on the worker count or scheduling.
pub fn run_experiment_with_threads(config: &ExperimentConfig, threads: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let jobs: Vec<(f64, usize)> = config
        .p_values
        .iter()
        .flat_map(|&p| (0..config.num_trials).map(move |t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialRecord>> =
        pool.install(|| jobs.par_iter().map(|&(p, t)| run_trial(config, p, t)).collect());
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (&(p, trial), result) in jobs.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(TrialFailure {
                trial,
                p,
                seed: trial_seed(config.master_seed, p, trial),
                message: e.to_string(),
            }),
        }
    }
    let summary = summarize(&records, &config.p_values, &config.checkpoints());
    Ok(ExperimentOutcome {
        records,
        failures,
        summary,
    })
}

pub const TRIALS_FILE: &str = "trials.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Seventeen significant digits, which round-trips every `f64`.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the long-format per-trial table. A `lyapunov` column is appended
/// when any record carries Lyapunov values.
pub fn write_trials_csv<W: std::io::Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let with_lyapunov = records.iter().flat_map(|r| &r.samples).any(|s| s.lyapunov.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["p", "trial", "seed", "stage", "qre_gap", "q_diff"];
    if with_lyapunov {
        header.push("lyapunov");
    }
    w.write_record(&header)?;
    for r in records {
        for s in &r.samples {
            let mut row = vec![num(r.p), r.trial.to_string(), r.seed.to_string(), s.stage.to_string(), num(s.qre_gap), num(s.q_diff)];
            if with_lyapunov {
                row.push(s.lyapunov.map(num).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(summary: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "stage", "metric", "mean", "std"])?;
    for row in summary {
        w.write_record([num(row.p), row.stage.to_string(), row.metric.to_string(), num(row.mean), num(row.std)])?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

/// Writes `trials.csv` and `summary.csv` into `dir`, creating it if needed.
/// Returns the two paths.
pub fn emit_csv(records: &[TrialRecord], summary: &[SummaryRow], dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trials = dir.join(TRIALS_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    write_trials_csv(records, create(&trials)?).map_err(|e| with_path(e, &trials))?;
    write_summary_csv(summary, create(&summary_path)?).map_err(|e| with_path(e, &summary_path))?;
    Ok((trials, summary_path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}
