//! `jackpot`: pre-train a network, score it with a pruning criterion, search
//! a mask over its frozen weights, fine-tune, and run the experiment suites.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jackpot::experiment::Suite;
use jackpot::metrics::GroupKey;
use jackpot::{Error, Result};

use commands::Context;
use config::{Config, Precision};
use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "jackpot", version, about = "Mask search over frozen pre-trained weights")]
struct Cli {
    /// TOML configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root. Overrides the config file.
    #[arg(long, global = true, env = jackpot::data::DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Root seed. Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Worker threads for `experiment`. Overrides `[experiment] threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense network and write its checkpoint.
    Pretrain,
    /// Score the pre-trained weights with `[score] criterion` and write masks.
    Score,
    /// Search masks over the frozen pre-trained weights.
    Search,
    /// Fine-tune the weights surviving a searched mask.
    Finetune,
    /// Run one experiment suite.
    Experiment {
        /// existence, criteria_overlap, warmup_speed, finetune_ablation or epoch_stability
        #[arg(value_parser = parse_suite)]
        suite: Suite,
    },
    /// Aggregate top-1 over one or more runs CSVs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "criterion-sparsity")]
        group: Group,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Group {
    Criterion,
    Sparsity,
    CriterionSparsity,
    ArchCriterionSparsity,
}

impl From<Group> for GroupKey {
    fn from(g: Group) -> Self {
        match g {
            Group::Criterion => GroupKey::Criterion,
            Group::Sparsity => GroupKey::Sparsity,
            Group::CriterionSparsity => GroupKey::CriterionSparsity,
            Group::ArchCriterionSparsity => GroupKey::ArchCriterionSparsity,
        }
    }
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => 3,
        Error::Numeric(_) | Error::DegenerateGradient(_) | Error::Integrity(_) => 4,
    }
}

fn resolve(cli: &Cli) -> Result<Context> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.run.precision = p;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        cfg.experiment.threads = t;
    }
    let data_dir = cli.data_dir.clone().or_else(|| cfg.data.dir.clone());
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    Ok(Context { cfg, out_dir: cli.out_dir.clone(), data_dir })
}

macro_rules! by_precision {
    ($ctx:expr, $f:ident $(, $arg:expr)*) => {
        match $ctx.cfg.run.precision {
            Precision::F32 => commands::$f::<f32>($ctx $(, $arg)*),
            Precision::F64 => commands::$f::<f64>($ctx $(, $arg)*),
        }
    };
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = resolve(cli)?;
    let (name, files) = match &cli.command {
        Command::Pretrain => ("pretrain".to_string(), by_precision!(&ctx, pretrain)?),
        Command::Score => ("score".to_string(), by_precision!(&ctx, score)?),
        Command::Search => ("search".to_string(), by_precision!(&ctx, search_cmd)?),
        Command::Finetune => ("finetune".to_string(), by_precision!(&ctx, finetune_cmd)?),
        Command::Experiment { suite } => (format!("experiment-{}", suite.name()), by_precision!(&ctx, experiment, *suite, cli.threads)?),
        Command::Report { runs, group } => ("report".to_string(), commands::report(&ctx, runs, (*group).into())?),
    };
    Manifest::new(&name, &ctx.cfg, &ctx.out_dir, &files)?.write(&ctx.out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jackpot: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
