//! Experiment CLI: execute configured continual-learning runs, aggregate
//! metrics across run directories, and export latent samples.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metacl::harness::{self, DatasetId, EvalMode, RunConfig};

#[derive(Parser)]
#[command(
    name = "metacl",
    version,
    about = "Continual learning by consolidating a generative model over classifier weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment from a TOML config and persist its metrics.
    Run(RunArgs),
    /// Aggregate final metrics across run directories, one line per
    /// distinct configuration, and write report.csv.
    Report {
        /// Run directories produced by `run`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the aggregate CSV.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Draw latent samples from a finished run's task priors into
    /// latents.csv beside its other outputs.
    ExportLatents {
        /// Run directory holding a persisted autoencoder state.
        #[arg(long)]
        run: PathBuf,
        /// Latent draws per task.
        #[arg(long, default_value_t = 20)]
        per_task: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Inference mode used at evaluation time.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Ensemble size per prediction.
    #[arg(long)]
    ensemble: Option<usize>,
    /// Weight-vector segment length for the autoencoder.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Total exemplar budget shared across tasks.
    #[arg(long)]
    buffer: Option<usize>,
    /// Drop the generative model; ensemble members are finetuned random
    /// initializations.
    #[arg(long)]
    skip_vae: bool,
    /// Use a standard-normal prior everywhere instead of learned priors.
    #[arg(long)]
    sn_prior: bool,
    /// Add the decoded-classifier auxiliary loss while training the
    /// autoencoder.
    #[arg(long)]
    aux_clf_loss: bool,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DatasetArg {
    SplitMnist,
    PermutedMnist,
    Synthetic,
}

impl From<DatasetArg> for DatasetId {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::SplitMnist => DatasetId::SplitMnist,
            DatasetArg::PermutedMnist => DatasetId::PermutedMnist,
            DatasetArg::Synthetic => DatasetId::Synthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aware,
    Agnostic,
    Both,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Aware => EvalMode::TaskAware,
            ModeArg::Agnostic => EvalMode::TaskAgnostic,
            ModeArg::Both => EvalMode::Both,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report { dirs, out } => cmd_report(&dirs, &out),
        Command::ExportLatents {
            run,
            per_task,
            seed,
        } => cmd_export_latents(&run, per_task, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(args: RunArgs) -> metacl::Result<()> {
    let mut config = RunConfig::from_file(&args.config)?;
    if let Some(s) = args.seed {
        config.seeds = vec![s];
    }
    if let Some(d) = args.dataset {
        config.dataset = d.into();
    }
    if let Some(m) = args.mode {
        config.mode = m.into();
    }
    if let Some(e) = args.ensemble {
        config.ensemble = e;
    }
    if let Some(c) = args.chunk_size {
        config.chunk_size = c;
    }
    if let Some(b) = args.buffer {
        config.buffer = b;
    }
    if args.skip_vae {
        config.skip_vae = true;
    }
    if args.sn_prior {
        config.sn_prior = true;
    }
    if args.aux_clf_loss {
        config.aux_clf_loss = true;
    }
    if let Some(o) = args.out {
        config.out_dir = o;
    }
    config.validate()?;

    harness::run(&config)?;
    let line = harness::report(&[config.out_dir.clone()])?;
    println!("{}", line.render());
    println!("results written to {}", config.out_dir.display());
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> metacl::Result<()> {
    // One aggregate per distinct configuration; seeds/out_dir/data_dir
    // differences do not split a group.
    let mut groups: Vec<(RunConfig, Vec<PathBuf>)> = Vec::new();
    for dir in dirs {
        let key = harness::load_run_config(dir)?.aggregation_key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(dir.clone()),
            None => groups.push((key, vec![dir.clone()])),
        }
    }
    let mut lines = Vec::new();
    for (_, members) in &groups {
        let line = harness::report(members)?;
        println!("{}", line.render());
        lines.push(line);
    }
    std::fs::write(out, harness::report_csv(&lines))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export_latents(run: &Path, per_task: usize, seed: u64) -> metacl::Result<()> {
    let out = harness::export_latents_for_run(run, per_task, seed)?;
    println!("wrote {}", out.display());
    Ok(())
}
