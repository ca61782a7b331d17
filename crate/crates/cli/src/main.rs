use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polyq::analysis::{qre_gap, solve_qre, QreOptions};
use polyq::dynamics::agent_stream;
use polyq::experiment::{emit_csv, run_experiment, run_trial, ExperimentConfig};
use polyq::game::{generate_potential, generate_zero_sum};
use polyq::ode::{check_lyapunov_descent, integrate, FlowState, IntegrateOptions, LyapunovKind, Method};
use polyq::{DirectedGraph, Error, GameKind, PolymatrixGame};
use serde_json::json;

#[derive(Parser)]
#[command(name = "polyq", version, about = "Individual Q-learning in polymatrix games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random game file.
    Generate(ConfigArgs),
    /// Run a single trial and print its record as JSON.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trial index.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run every trial of the configured sweep and write CSV tables.
    Experiment(ConfigArgs),
    /// Solve for the logit equilibrium of a game file.
    Qre {
        game: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iters: usize,
    },
    /// Integrate the mean-field flow from a random state and check Lyapunov descent.
    Ode {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use this game instead of generating one.
        #[arg(long)]
        game: Option<PathBuf>,
        #[arg(long, default_value_t = 50.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value = "rk4")]
        method: Method,
        #[arg(long, default_value_t = 100)]
        sample_every: usize,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file; the flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Edge probabilities of the observation graph, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    #[arg(long)]
    stages: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// zero-sum or potential.
    #[arg(long)]
    kind: Option<GameKind>,
    #[arg(long)]
    lyapunov: bool,
    #[arg(long)]
    fixed_game: bool,
    #[arg(long)]
    symmetric: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> polyq::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        if let Some(p) = &self.p {
            c.p_values = p.clone();
        }
        if let Some(s) = self.stages {
            c.num_stages = s;
        }
        if let Some(t) = self.trials {
            c.num_trials = t;
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(n) = self.agents {
            c.num_agents = n;
        }
        if let Some(m) = self.actions {
            c.actions_per_agent = m;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(k) = self.kind {
            c.game_kind = k;
        }
        c.lyapunov |= self.lyapunov;
        c.fixed_game |= self.fixed_game;
        c.symmetric_graph |= self.symmetric;
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Input(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: impl std::fmt::Display) -> Result<(), Failure> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn write_output(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn generate_game(c: &ExperimentConfig, seed: u64) -> polyq::Result<PolymatrixGame> {
    let counts = vec![c.actions_per_agent; c.num_agents];
    let mut rng = agent_stream(seed, 0);
    match c.game_kind {
        GameKind::Potential => generate_potential(&counts, c.payoff_range, &mut rng),
        _ => generate_zero_sum(&counts, c.payoff_range, &mut rng),
    }
}

fn generate(args: &ConfigArgs) -> Result<(), Failure> {
    let c = args.resolve()?;
    let game = generate_game(&c, c.master_seed)?;
    let text = game.to_json();
    match &args.out {
        Some(dir) => write_output(dir, "game.json", &text),
        None => emit(&text),
    }
}

fn run(args: &ConfigArgs, trial: usize) -> Result<(), Failure> {
    let c = args.resolve()?;
    let p = match c.p_values.as_slice() {
        [p] => *p,
        _ if args.p.is_none() => 1.0,
        _ => return Err(Failure::Usage("run takes a single --p value".into())),
    };
    let record = run_trial(&c, p, trial)?;
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    if let Some(dir) = &args.out {
        write_output(dir, "trial.json", &text)?;
        emit_csv(std::slice::from_ref(&record), &[], dir)?;
    } else {
        emit(&text)?;
    }
    Ok(())
}

fn experiment(args: &ConfigArgs) -> Result<(), Failure> {
    let c = args.resolve()?;
    let outcome = run_experiment(&c)?;
    let (trials, summary) = emit_csv(&outcome.records, &outcome.summary, &c.out_dir)?;
    emit(format_args!("wrote {} and {}", trials.display(), summary.display()))?;
    let last = c.num_stages;
    for row in outcome.summary.iter().filter(|r| r.stage == last) {
        emit(format_args!("p={} stage={} {} mean={:.6e} std={:.6e}", row.p, row.stage, row.metric, row.mean, row.std))?;
    }
    if outcome.all_succeeded() {
        Ok(())
    } else {
        for f in &outcome.failures {
            eprintln!("trial {} (p={}, seed={}) failed: {}", f.trial, f.p, f.seed, f.message);
        }
        Err(Failure::Runtime(format!("{} trials failed", outcome.failures.len())))
    }
}

fn qre(path: &Path, tau: f64, tol: f64, max_iters: usize) -> Result<(), Failure> {
    let game = PolymatrixGame::load(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    let opts = QreOptions { tol, max_iters, ..Default::default() };
    let sol = solve_qre(&game, tau, &opts)?;
    let gap = qre_gap(&game, &sol.profile, tau)?;
    let report = json!({
        "profile": sol.profile,
        "qre_gap": gap,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
    });
    emit(format_args!("{report:#}"))?;
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("no convergence after {} iterations", sol.iterations)))
    }
}

fn ode(args: &ConfigArgs, game_path: Option<&Path>, opts: IntegrateOptions) -> Result<(), Failure> {
    let c = args.resolve()?;
    let game = match game_path {
        Some(path) => PolymatrixGame::load(path).map_err(|e| Failure::Runtime(e.to_string()))?,
        None => generate_game(&c, c.master_seed)?,
    };
    let which = LyapunovKind::for_game(game.kind())
        .ok_or_else(|| Failure::Usage("the ode check needs a zero-sum or potential game".into()))?;
    let p = c.p_values.last().copied().unwrap_or(1.0);
    let n = game.num_agents();
    let graph = DirectedGraph::erdos_renyi(n, p, &mut agent_stream(c.master_seed, 1))?;
    let state0 = FlowState::random(game.action_counts(), 1.0, &mut agent_stream(c.master_seed, 2));
    let traj = integrate(&state0, &game, &graph, c.tau, &opts)?;
    let report = check_lyapunov_descent(&traj, &game, c.tau, which)?;
    let summary = json!({
        "lyapunov": which,
        "passed": report.passed,
        "samples": report.values.len(),
        "violations": report.violations,
        "initial_value": report.values[0],
        "final_value": report.final_value,
        "max_increase": report.max_increase,
        "final_fixed_point_residual": report.final_fixed_point_residual,
        "final_tracking_error": report.final_tracking_error,
        "max_projection": traj.max_projection,
    });
    emit(format_args!("{summary:#}"))?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        report.save_csv(dir.join("descent.csv"))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} descent violations", report.violations)))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate(args) => generate(args),
        Command::Run { config, trial } => run(config, *trial),
        Command::Experiment(args) => experiment(args),
        Command::Qre { game, tau, tol, max_iters } => qre(game, *tau, *tol, *max_iters),
        Command::Ode { config, game, t_end, step, method, sample_every } => ode(
            config,
            game.as_deref(),
            IntegrateOptions {
                step: *step,
                t_end: *t_end,
                method: *method,
                sample_every: *sample_every,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
