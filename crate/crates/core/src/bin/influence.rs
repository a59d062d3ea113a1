use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use influence_core::config::ExperimentConfig;
use influence_core::demo::{generate_demos, Corpus, RobotRandomization};
use influence_core::inference::{train, write_log_csv, LearnerNet};
use influence_core::planner::{evaluate, refine_on_policy, strategy_mean, write_metrics_csv, Strategy};
use influence_core::service::{self, Bias, ServiceState};
use influence_core::{Error, Result};

#[derive(Parser)]
#[command(name = "influence", version, about = "Infer and influence how simulated humans learn")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate demonstrations with randomized robot corrections.
    GenDemos {
        /// Environment name; overrides the config.
        #[arg(long)]
        env: Option<String>,
    },
    /// Fit the learning-dynamics network to a corpus.
    Train {
        /// Corpus file; `<out>/demos.jsonl` by default.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Closed-loop evaluation of robot strategies.
    Evaluate {
        #[arg(long)]
        env: Option<String>,
        /// Trained network for the Active strategy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated strategies; overrides the config.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Run the interactive session service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Offer the active-teaching condition.
        #[arg(long, value_enum)]
        teach: Option<OnOff>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownEnv(_) => 2,
        Error::Format(_) | Error::Json(_) => 3,
        Error::CheckpointRequired(_) => 4,
        Error::PortInUse(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match cli.command {
        Command::GenDemos { env } => {
            if let Some(env) = env {
                cfg.env = env;
            }
            gen_demos(&cfg, cli.force)
        }
        Command::Train { corpus } => cmd_train(&cfg, corpus, cli.force),
        Command::Evaluate { env, checkpoint, strategies } => {
            if let Some(env) = env {
                cfg.env = env;
            }
            if checkpoint.is_some() {
                cfg.evaluate.checkpoint = checkpoint;
            }
            if !strategies.is_empty() {
                cfg.evaluate.strategies = strategies.iter().map(|s| Strategy::parse(s)).collect::<Result<_>>()?;
            }
            cmd_evaluate(&cfg, cli.force)
        }
        Command::Serve { port, teach } => {
            if let Some(port) = port {
                cfg.serve.port = port;
            }
            if let Some(t) = teach {
                cfg.serve.teach = matches!(t, OnOff::On);
            }
            cmd_serve(&cfg)
        }
    }
}

fn prepare_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn gen_demos(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let human = cfg.human_spec(&env)?;
    let robot = RobotRandomization { sigma: cfg.demos.robot_sigma.unwrap_or(env.robot_sigma) };
    let horizon = cfg.demos.horizon.unwrap_or(env.horizon);
    let path = cfg.corpus_path();
    prepare_output(&path, force)?;
    let demos = generate_demos(&env, &human, robot, cfg.demos.n, horizon, cfg.seed)?;
    let corpus = Corpus { env, human, seed: cfg.seed, robot, config_hash: cfg.hash(), demos };
    corpus.save(&path)?;
    info!("wrote {} demonstrations to {}", corpus.demos.len(), path.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, corpus: Option<PathBuf>, force: bool) -> Result<()> {
    cfg.validate()?;
    let corpus_path = corpus.unwrap_or_else(|| cfg.corpus_path());
    let mut corpus = Corpus::load(&corpus_path)?;
    let (ckpt, log_path) = (cfg.checkpoint_path(), cfg.train_log_path());
    prepare_output(&ckpt, force)?;
    prepare_output(&log_path, force)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let (mut net, mut logs) = train(&corpus, &train_cfg)?;
    if cfg.refine.rounds > 0 {
        (net, logs) = refine_on_policy(&mut corpus, net, &train_cfg, &cfg.planner, cfg.refine.rounds, cfg.refine.episodes)?;
    }
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        info!("nll {:.4} -> {:.4} over {} epochs", first.nll, last.nll, last.epoch);
    }
    net.config_hash = cfg.hash();
    net.save(&ckpt)?;
    write_log_csv(std::fs::File::create(&log_path)?, &logs, &cfg.hash())?;
    info!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn load_net(path: &Path) -> Result<LearnerNet> {
    if !path.exists() {
        return Err(Error::CheckpointRequired(format!("active ({} not found)", path.display())));
    }
    LearnerNet::load(path)
}

fn cmd_evaluate(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let human = cfg.human_spec(&env)?;
    let strategies = cfg.strategies(&env);
    let net = if strategies.contains(&Strategy::Active) {
        let path = match &cfg.evaluate.checkpoint {
            Some(p) => p.clone(),
            None if cfg.checkpoint_path().exists() => cfg.checkpoint_path(),
            None => return Err(Error::CheckpointRequired(Strategy::Active.name().into())),
        };
        let net = load_net(&path)?;
        net.check_env(&env)?;
        Some(net)
    } else {
        None
    };
    let path = cfg.metrics_path();
    prepare_output(&path, force)?;
    let horizon = cfg.evaluate.horizon.unwrap_or(env.horizon);
    let runs = evaluate(&env, &human, &strategies, &cfg.planner, net.as_ref(), cfg.evaluate.episodes, horizon, cfg.seed)?;
    write_metrics_csv(std::fs::File::create(&path)?, &env, &human, &runs, &cfg.hash())?;
    println!("{:<8} {:>12} {:>12} {:>12}", "strategy", "final_err", "mean_effort", "task_cost");
    for &s in &strategies {
        let err = strategy_mean(&runs, s, |r| r.final_theta_err());
        let effort = strategy_mean(&runs, s, |r| r.metrics.iter().map(|m| m.effort).sum::<f64>() / r.metrics.len().max(1) as f64);
        let cost = strategy_mean(&runs, s, |r| r.total_task_cost());
        println!("{:<8} {err:>12.4} {effort:>12.4} {cost:>12.3}", s.name());
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_serve(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let mut nets = HashMap::new();
    for (bias, path) in [(Bias::X, &cfg.serve.checkpoint_x), (Bias::Y, &cfg.serve.checkpoint_y)] {
        if let Some(path) = path {
            let net = load_net(path)?;
            net.check_env(&bias.env())?;
            nets.insert(bias, Arc::new(net));
        }
    }
    if cfg.serve.teach && nets.is_empty() {
        return Err(Error::CheckpointRequired("active-teaching".into()));
    }
    if !cfg.serve.teach {
        warn!("teaching disabled; only no-teaching sessions are offered");
    }
    let mut planner = cfg.planner.clone();
    planner.budget_ms = Some(cfg.serve.budget_ms);
    let state = Arc::new(ServiceState::new(nets, planner, cfg.serve.teach, cfg.serve.tick_hz));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = service::bind(&cfg.serve.host, cfg.serve.port).await?;
        service::serve(listener, state).await
    })
}
