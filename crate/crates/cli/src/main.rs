use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mvcrl::algebra::closure;
use mvcrl::harness::{self, RunConfig};
use mvcrl::oracle::KS_ALPHA;
use mvcrl::{Error, IndexSet};

/// Multi-view contrastive identifiability experiments.
#[derive(Parser, Debug)]
#[command(name = "mvcrl", version)]
struct Cli {
    /// Rayon worker threads; 1 makes runs bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    config: PathBuf,

    /// Fill unspecified fields from the reduced desk profile.
    #[arg(long)]
    desk_scale: bool,

    /// Train a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the ground truth (covariance, view sets, mixings) as JSON.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: $MVCRL_OUT/<name> or runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run generate, train and evaluate for a config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a finished run from its checkpoints.
    Eval {
        /// Run directory containing manifest.json.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the recomputed tables.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the identifiable blocks derivable from the config's views.
    Algebra {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Emit Graphviz instead of text.
        #[arg(long)]
        dot: bool,
    },
    /// Check the closed-form optimal encoders on fresh draws.
    OracleCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated views; defaults to all.
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<usize>>,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
    },
    /// Merge metrics of several runs into mean ± std tables.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config problems map to exit status 2, everything else to 1.
enum Failure {
    Config(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(args: &ConfigArgs, threads: Option<usize>) -> Result<RunConfig, Failure> {
    if !args.config.is_file() {
        return Err(Failure::Config(format!("config file not found: {}", args.config.display())));
    }
    let mut cfg = RunConfig::load(&args.config, args.desk_scale).map_err(|e| match e {
        Error::InvalidConfig(v) => Failure::Config(format!("invalid config:\n  {}", v.join("\n  "))),
        other => Failure::Config(format!("cannot read {}: {other}", args.config.display())),
    })?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Failure::Config(format!("invalid config:\n  {}", errs.join("\n  "))));
    }
    Ok(cfg)
}

fn print_tables(dir: &Path) -> anyhow::Result<()> {
    for f in ["heatmap.csv", "mcc.csv"] {
        let p = dir.join(f);
        println!("{f}:\n{}", std::fs::read_to_string(&p).with_context(|| p.display().to_string())?);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let cfg = load_config(&cfg, cli.threads)?;
            let dir = harness::resolve_out_dir(out.as_deref(), &cfg.name);
            let system = cfg.system().context("building ground truth")?;
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            let path = dir.join("ground_truth.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&system.to_doc()).context("serializing")?)
                .with_context(|| path.display().to_string())?;
            println!("{}", path.display());
        }
        Command::Train { cfg, out } => {
            let cfg = load_config(&cfg, cli.threads)?;
            let dir = harness::resolve_out_dir(out.as_deref(), &cfg.name);
            let manifest = harness::run(&cfg, &dir).map_err(|e| Failure::Run(e.into()))?;
            print_tables(&dir)?;
            println!(
                "manifest: {} ({:.1} s)",
                dir.join("manifest.json").display(),
                manifest.wall_clock_seconds
            );
        }
        Command::Eval { run, out } => {
            let r = harness::evaluate_run(&run, out.as_deref()).context("re-evaluating run")?;
            if !r.reproduced() {
                return Err(Failure::Run(anyhow::anyhow!(
                    "recomputed metrics differ from {}",
                    run.join("metrics.json").display()
                )));
            }
            println!("metrics reproduced exactly for {}", run.display());
            if let Some(out) = out {
                print_tables(&out)?;
            }
        }
        Command::Algebra { cfg, dot } => {
            let cfg = load_config(&cfg, cli.threads)?;
            let system = cfg.system().context("building ground truth")?;
            let blocks = closure(&system.views, &system.spec).context("closure")?;
            print!("{}", if dot { blocks.to_dot() } else { blocks.render() });
        }
        Command::OracleCheck { cfg, subset, samples } => {
            let run_cfg = load_config(&cfg, cli.threads)?;
            let system = run_cfg.system().context("building ground truth")?;
            let subset = subset
                .map(IndexSet::new)
                .transpose()
                .map_err(|e| Failure::Config(format!("--subset: {e}")))?;
            let seed = cfg.seed.unwrap_or(0);
            let r = harness::oracle_check(&system, subset.as_ref(), samples, seed).context("oracle check")?;
            println!("{}", serde_json::to_string_pretty(&r).context("serializing")?);
            if r.alignment_residual >= 1e-7 || r.min_p_value() <= KS_ALPHA || r.set_loss_alignment >= 1e-6 {
                return Err(Failure::Run(anyhow::anyhow!("oracle encoders failed the check")));
            }
        }
        Command::Report { runs, out } => {
            harness::report(&runs, &out).context("merging runs")?;
            print_tables(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
