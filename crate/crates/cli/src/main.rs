use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use scamfqi::data;
use scamfqi::fqi::{self, AgentPolicy, JointPolicySet};
use scamfqi::game::{distance_graph, ShareMode};
use scamfqi::harness::{self, ExperimentConfig, OracleSpec};

#[derive(Parser)]
#[command(name = "scamfqi", version, about = "Decentralized fitted Q-iteration workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML or JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "SCAMFQI_OUT")]
    out: Option<PathBuf>,
    /// Single seed replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Sharing distances, comma separated.
    #[arg(long, value_delimiter = ',')]
    d: Option<Vec<usize>>,
    /// Sharing mode.
    #[arg(long)]
    mode: Option<ShareMode>,
    /// Number of FQI iterations.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect uniform-policy datasets for one (d, mode, seed).
    Collect(Common),
    /// Train from a dataset directory and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `collect`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate checkpoints written by `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Full sweep: collect, train, evaluate and aggregate.
    Run(Common),
    /// Exact tabular study of a JSON game; writes the bound report.
    Oracle {
        /// Tabular game or oracle spec JSON.
        game: PathBuf,
        #[arg(long, env = "SCAMFQI_OUT")]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Recompute curves, chart and trends from a run directory.
    Report {
        dir: PathBuf,
    },
}

/// Marks errors caused by bad configuration or arguments.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let is_config = e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<scamfqi::Error>(),
                Some(scamfqi::Error::Config(_) | scamfqi::Error::Parse { .. })
            )
    });
    if is_config {
        2
    } else {
        3
    }
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(config_err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        config.out = out.clone();
    }
    if let Some(seed) = c.seed {
        config.seeds = vec![seed];
    }
    if let Some(d) = &c.d {
        config.d_values = d.clone();
    }
    if let Some(mode) = c.mode {
        config.modes = vec![mode];
    }
    if let Some(k) = c.k {
        config.k = k;
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

/// The single (d, mode, seed) cell a stage command works on.
fn single_cell(config: &ExperimentConfig) -> anyhow::Result<(usize, ShareMode, u64)> {
    match (&config.d_values[..], &config.modes[..], &config.seeds[..]) {
        ([d], [m], [s]) => Ok((*d, *m, *s)),
        _ => Err(config_err(anyhow!(
            "this command needs exactly one d, mode and seed (use --d, --mode and --seed)"
        ))),
    }
}

fn collect(c: &Common) -> anyhow::Result<()> {
    let config = load_config(c)?;
    let (d, mode, seed) = single_cell(&config)?;
    let env = config.environment().map_err(config_err)?;
    let graph = distance_graph(env.adjacency(), d)?;
    let sets = data::collect(
        &env,
        &graph,
        mode,
        &data::UniformPolicy,
        config.episodes_collect,
        env.horizon(),
        harness::collect_seed(seed),
    )?;
    let manifest = data::save(&sets, &config.out)?;
    let records: usize = manifest.datasets.iter().map(|h| h.record_count).sum();
    println!("wrote {} datasets ({records} records) to {}", manifest.datasets.len(), config.out.display());
    Ok(())
}

fn train(c: &Common, dir: &Path) -> anyhow::Result<()> {
    let config = load_config(c)?;
    let seed = config.seeds[0];
    let sets = data::load(dir).with_context(|| format!("loading datasets from {}", dir.display()))?;
    let out = fqi::train(&sets, &config.train_config(seed), Some(&config.out))?;
    for row in out.log.iter().filter(|r| r.agent == 0) {
        println!("iteration {}: agent 0 train mse {:.6}", row.iteration, row.train_mse);
    }
    println!("checkpoints in {}", config.out.display());
    Ok(())
}

fn eval(c: &Common, checkpoints: &Path) -> anyhow::Result<()> {
    let config = load_config(c)?;
    let (d, mode, seed) = single_cell(&config)?;
    let env = config.environment().map_err(config_err)?;
    let graph = distance_graph(env.adjacency(), d)?;
    let agents = graph.agent_count();
    let mut rows = Vec::new();
    for k in 0..=config.k {
        if !checkpoints.join(format!("iter_{k}")).is_dir() {
            break;
        }
        let qs = fqi::load_checkpoint(checkpoints, k, agents)?;
        let policies = qs
            .into_iter()
            .map(|q| AgentPolicy::new(q, config.epsilon))
            .collect::<scamfqi::Result<Vec<_>>>()?;
        let report = fqi::evaluate(
            &env,
            &JointPolicySet { policies },
            &graph,
            mode,
            config.episodes_eval,
            env.horizon(),
            harness::eval_seed(seed),
        )?;
        println!(
            "k={k}: makespan {:.3}, return {:.3}, completed {:.2}",
            report.mean_makespan, report.mean_return, report.completion_rate
        );
        rows.push(harness::ResultRow {
            d,
            mode,
            seed,
            iteration: k,
            makespan: report.mean_makespan,
            ret: report.mean_return,
        });
    }
    if rows.is_empty() {
        bail!("no checkpoints under {}", checkpoints.display());
    }
    std::fs::create_dir_all(&config.out)?;
    harness::write_rows(&config.out.join("eval.csv"), &rows)?;
    Ok(())
}

fn run(c: &Common) -> anyhow::Result<()> {
    let config = load_config(c)?;
    let out = harness::run_with(&config, &mut |line| eprintln!("{line}"))?;
    print!("{}", out.trends.render());
    println!("artifacts in {}", config.out.display());
    Ok(())
}

fn oracle(game: &Path, out: Option<&Path>, k: Option<usize>) -> anyhow::Result<()> {
    let mut spec = OracleSpec::load(game).map_err(config_err)?;
    if let Some(k) = k {
        spec.params.k = k;
    }
    let report = spec.study()?;
    let dir = out.unwrap_or(Path::new("."));
    harness::write_study(&report, dir)?;
    println!("{}", serde_json::to_string_pretty(&report.bound)?);
    println!("actual gap {:.6}", report.actual_gap);
    Ok(())
}

fn report(dir: &Path) -> anyhow::Result<()> {
    let (curves, trends) = harness::report(dir)?;
    println!("{} curve points", curves.len());
    print!("{}", trends.render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect(c) => collect(c),
        Command::Train { common, data } => train(common, data),
        Command::Eval { common, checkpoints } => eval(common, checkpoints),
        Command::Run(c) => run(c),
        Command::Oracle { game, out, k } => oracle(game, out.as_deref(), *k),
        Command::Report { dir } => report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
