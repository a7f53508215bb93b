//! `langfold` command-line tool: data generation, staged training,
//! evaluation, single-instruction rollouts and depth rendering.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use langfold::cloth_sim::{render_depth, spawn, Camera, SpawnConfig};
use langfold::eval::{
    evaluate_suite, export_pick_heatmap, export_place_heatmap, rollout, Decision, LearnedPolicy, OraclePolicy,
    Policy, RandomPolicy, RolloutOptions, Suite,
};
use langfold::lang::{Direction, Language, TaskSpec, TaskType};
use langfold::oracle::{generate_dataset, read_dataset};
use langfold::train::{
    load_edge_gnn, load_policy, save_edge_gnn, save_policy, train_edge_gnn, train_policy, train_success_classifier,
    Stage,
};
use thiserror::Error;

use config::{ConfigError, RunConfig, KEYS};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] langfold::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn config_keys_help() -> String {
    let mut s = String::from("Config file keys (`key = value`, `#` comments; flags override the file):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<17} [default: {d}]\n"));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "langfold", version, about = "Language-conditioned cloth folding: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// Run configuration file [default: none]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed for all randomness [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the serial reference mode [default: available cores]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
}

/// Optimizer flags shared by the training stages.
#[derive(Args, Debug)]
struct Optim {
    /// Epochs for this stage [default: 20 edges, 100 policy, 20 success]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    lr: Option<f32>,
    /// Minibatch size [default: 16]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch: Option<u64>,
    /// Hold out every N-th demonstration for reporting [default: 10]
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    holdout_every: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Random,
    Oracle,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate oracle demonstrations into an LDOM file
    #[command(after_help = config_keys_help())]
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output LDOM file (required)
        #[arg(long)]
        out: PathBuf,
        /// Demonstrations per training task (task type and direction) [default: 100]
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        demos_per_task: Option<u64>,
    },
    /// Stage 1: train the mesh-edge classifier
    #[command(after_help = config_keys_help())]
    TrainEdges {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        optim: Optim,
        /// Demonstration LDOM file [default: config `data`]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output LDCK checkpoint (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the pick and place heads with the edge GNN frozen
    #[command(after_help = config_keys_help())]
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        optim: Optim,
        /// Demonstration LDOM file [default: config `data`]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint [default: config `edges`]
        #[arg(long)]
        edges: Option<PathBuf>,
        /// Output LDCK checkpoint (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3: train the success classifier on frozen features
    #[command(after_help = config_keys_help())]
    TrainSuccess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        optim: Optim,
        /// Demonstration LDOM file [default: config `data`]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-2 checkpoint [default: config `policy`]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Output LDCK checkpoint (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy on every task type and split
    #[command(after_help = config_keys_help())]
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint [default: config `policy`]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Evaluate a baseline instead of a checkpoint [default: none]
        #[arg(long, value_enum, conflicts_with = "policy")]
        baseline: Option<Baseline>,
        /// Output report CSV (required)
        #[arg(long)]
        out: PathBuf,
        /// Episodes per task type and split [default: 50]
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: Option<u64>,
        /// Maximum actions per episode [default: 4]
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: Option<u64>,
        /// Ignore the success classifier and always run the full horizon [default: off]
        #[arg(long)]
        fixed_horizon: bool,
    },
    /// Run one episode and print its actions and score
    #[command(after_help = config_keys_help())]
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint [default: config `policy`]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Act with the scripted oracle instead of a checkpoint [default: off]
        #[arg(long, conflicts_with = "policy")]
        oracle: bool,
        /// Task type: corner, triangle or half (required)
        #[arg(long)]
        task: String,
        /// Fold direction, e.g. bottom_left or left_over_right (required)
        #[arg(long)]
        direction: String,
        /// Instruction template index [default: 0]
        #[arg(long, default_value_t = 0)]
        template: usize,
        /// Maximum actions [default: 4]
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: Option<u64>,
        /// Ignore the success classifier [default: off]
        #[arg(long)]
        fixed_horizon: bool,
        /// Directory for per-step heatmap exports [default: none]
        #[arg(long, value_name = "DIR")]
        dump: Option<PathBuf>,
    },
    /// Spawn a cloth and write its depth image as a 16-bit PGM
    #[command(after_help = config_keys_help())]
    Render {
        #[command(flatten)]
        common: Common,
        /// Output PGM file (required)
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w as usize;
        }
        Ok(cfg)
    }
}

impl Optim {
    fn apply(&self, cfg: &mut RunConfig, epochs: fn(&mut RunConfig) -> &mut usize) {
        if let Some(e) = self.epochs {
            *epochs(cfg) = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch {
            cfg.batch = b as usize;
        }
        if let Some(h) = self.holdout_every {
            cfg.holdout_every = h as usize;
        }
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or `{name}` in the config file)")))
}

fn read_demos(path: &Path) -> Result<Vec<langfold::oracle::Demonstration>, CliError> {
    let demos = read_dataset(path)?;
    log::info!("read {} demonstrations from {}", demos.len(), path.display());
    Ok(demos)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, out, demos_per_task } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = demos_per_task {
                cfg.demos_per_task = n as usize;
            }
            let demos = generate_dataset(cfg.demos_per_task, cfg.seed, &out, cfg.workers)?;
            println!("wrote {} demonstrations to {}", demos.len(), out.display());
        }
        Command::TrainEdges { common, optim, data, out } => {
            let mut cfg = common.resolve()?;
            optim.apply(&mut cfg, |c| &mut c.edge_epochs);
            let demos = read_demos(&required(data, &cfg.data, "data")?)?;
            let (gnn, report) = train_edge_gnn(&demos, &cfg.train_config())?;
            save_edge_gnn(&gnn, &out)?;
            println!(
                "edge GNN held-out F1 {:.4}, accuracy {:.4}; saved {}",
                report.heldout.f1(),
                report.heldout.accuracy(),
                out.display()
            );
        }
        Command::TrainPolicy { common, optim, data, edges, out } => {
            let mut cfg = common.resolve()?;
            optim.apply(&mut cfg, |c| &mut c.policy_epochs);
            let demos = read_demos(&required(data, &cfg.data, "data")?)?;
            let gnn = load_edge_gnn(&required(edges, &cfg.edges, "edges")?)?;
            let (model, report) = train_policy(&demos, &gnn, &cfg.train_config())?;
            save_policy(&gnn, &model, Stage::Policy, &out)?;
            let last = report.losses.last().copied().unwrap_or(f32::NAN);
            println!("policy final loss {last:.5}; saved {}", out.display());
        }
        Command::TrainSuccess { common, optim, data, policy, out } => {
            let mut cfg = common.resolve()?;
            optim.apply(&mut cfg, |c| &mut c.success_epochs);
            let demos = read_demos(&required(data, &cfg.data, "data")?)?;
            let (gnn, mut model, _) = load_policy(&required(policy, &cfg.policy, "policy")?)?;
            let report = train_success_classifier(&demos, &gnn, &mut model, &cfg.train_config())?;
            save_policy(&gnn, &model, Stage::Success, &out)?;
            println!("success classifier held-out accuracy {:.4}; saved {}", report.heldout.accuracy(), out.display());
        }
        Command::Eval { common, policy, baseline, out, episodes, horizon, fixed_horizon } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = episodes {
                cfg.episodes = n as usize;
            }
            if let Some(h) = horizon {
                cfg.horizon = h as usize;
            }
            if fixed_horizon {
                cfg.classifier_gated = false;
            }
            let opts = RolloutOptions { horizon: cfg.horizon, classifier_gated: cfg.classifier_gated, record: false };
            let policy: Box<dyn Policy> = match baseline {
                Some(Baseline::Random) => Box::new(RandomPolicy { seed: cfg.seed }),
                Some(Baseline::Oracle) => Box::new(OraclePolicy),
                None => Box::new(learned(&required(policy, &cfg.policy, "policy")?, opts.classifier_gated)?),
            };
            let suite = Suite::build(cfg.episodes, cfg.seed, cfg.workers)?;
            let report = evaluate_suite(policy.as_ref(), &suite, &opts, cfg.workers)?;
            report.write_csv(&out)?;
            print!("{}", report.to_table());
        }
        Command::Rollout { common, policy, oracle, task, direction, template, horizon, fixed_horizon, dump } => {
            let mut cfg = common.resolve()?;
            if let Some(h) = horizon {
                cfg.horizon = h as usize;
            }
            if fixed_horizon {
                cfg.classifier_gated = false;
            }
            let task_type = TaskType::from_name(&task).ok_or_else(|| CliError::Usage(format!("unknown task `{task}`")))?;
            let direction =
                Direction::from_name(&direction).ok_or_else(|| CliError::Usage(format!("unknown direction `{direction}`")))?;
            let spec = TaskSpec::new(task_type, direction).map_err(|e| CliError::Usage(e.to_string()))?;
            let instruction = Language::builtin().instruction(spec, template).map_err(|e| CliError::Usage(e.to_string()))?;
            let opts = RolloutOptions { horizon: cfg.horizon, classifier_gated: cfg.classifier_gated, record: dump.is_some() };
            let policy: Box<dyn Policy> = if oracle {
                Box::new(OraclePolicy)
            } else {
                Box::new(learned(&required(policy, &cfg.policy, "policy")?, opts.classifier_gated)?)
            };
            let result = rollout(policy.as_ref(), &instruction, cfg.seed, &opts)?;
            println!("instruction: {} ({})", instruction.text, instruction.split.name());
            for (i, a) in result.actions.iter().enumerate() {
                println!(
                    "step {i}: pick ({:.4}, {:.4}) place ({:.4}, {:.4})",
                    a.pick_xy[0], a.pick_xy[1], a.place_xy[0], a.place_xy[1]
                );
            }
            if result.classifier_stop {
                println!("stopped after {} steps", result.steps);
            }
            println!("error: {:.6} m", result.error);
            println!("success: {}", result.success);
            if let Some(dir) = dump {
                dump_traces(&dir, &result.traces)?;
            }
        }
        Command::Render { common, out } => {
            let cfg = common.resolve()?;
            let state = spawn(&SpawnConfig::default(), cfg.seed)?;
            render_depth(&state).write_pgm(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn learned(path: &Path, gated: bool) -> Result<LearnedPolicy, CliError> {
    let (gnn, model, stage) = load_policy(path)?;
    if gated && stage < Stage::Success {
        return Err(langfold::Error::Contract(format!(
            "{} has no trained success classifier; run train-success or pass --fixed-horizon",
            path.display()
        ))
        .into());
    }
    Ok(LearnedPolicy { gnn, model })
}

fn dump_traces(dir: &Path, traces: &[langfold::eval::StepTrace]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(langfold::Error::from)?;
    let camera = Camera::default();
    for (i, t) in traces.iter().enumerate() {
        if let (Some(out), Some(graph)) = (&t.output, &t.graph) {
            export_place_heatmap(&out.q_place, &camera, &dir.join(format!("step{i}_place.pgm")))?;
            export_pick_heatmap(&out.q_pick, graph, &dir.join(format!("step{i}_pick.csv")))?;
            let verdict = if matches!(t.decision, Decision::Stop) { "stop" } else { "act" };
            println!("step {i}: success logit {:.4} ({verdict}), heatmaps in {}", out.success_logit, dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
