use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pidssl::experiment::SweepParam;
use pidssl::ssl::BatchSource;
use pidssl_cli::commands::{self, Ctx};
use pidssl_cli::manifest::orphans;
use pidssl_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "pidssl",
    version,
    about = "Causally matched mini-batches for contrastive learning"
)]
struct Cli {
    /// TOML run configuration. Without it, defaults are used and `--seed` picks the seed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "PIDSSL_OUT", default_value = "runs")]
    out_dir: PathBuf,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Rerun a stage even when its manifest says it is up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    Random,
    Pid,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Alpha,
    A,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training, probe and test datasets.
    Datagen,
    /// Fit the latent variable model on the training set.
    TrainRlvm,
    /// Precompute the matched batch plan.
    Sample,
    /// Train contrastive encoders.
    TrainSsl {
        #[arg(long, value_enum, default_value = "both")]
        arm: Arm,
    },
    /// Probe both encoders on in- and out-of-distribution test sets.
    Evaluate,
    /// Run the numerical oracle suite. Exits 3 when a check fails.
    Oracle,
    /// Repeat the colored experiment over a parameter grid.
    Sweep {
        #[arg(long, value_enum)]
        param: Option<Param>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// List files in the output directory that no manifest accounts for.
    Orphans,
}

fn config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse(
            &format!("seed = {}\n", cli.seed.unwrap_or(0)),
            "<defaults>".as_ref(),
        )?,
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = config(&cli)?;
    if let Command::Sweep { param, values } = &cli.command {
        if let Some(p) = param {
            cfg.sweep.param = match p {
                Param::Alpha => SweepParam::Alpha,
                Param::A => SweepParam::A,
            };
        }
        if let Some(v) = values {
            cfg.sweep.values = v.clone();
        }
    }
    let ctx = Ctx {
        cfg,
        out: cli.out_dir.clone(),
        force: cli.force,
    };
    match cli.command {
        Command::Datagen => commands::datagen(&ctx)?,
        Command::TrainRlvm => commands::train_rlvm(&ctx)?,
        Command::Sample => commands::sample(&ctx)?,
        Command::TrainSsl { arm } => {
            let arms: &[BatchSource] = match arm {
                Arm::Random => &[BatchSource::Random],
                Arm::Pid => &[BatchSource::Pid],
                Arm::Both => &[BatchSource::Random, BatchSource::Pid],
            };
            for &a in arms {
                commands::train_ssl(&ctx, a)?;
            }
            return Ok(());
        }
        Command::Evaluate => commands::evaluate(&ctx)?,
        Command::Oracle => commands::oracle(&ctx)?,
        Command::Sweep { .. } => commands::sweep(&ctx)?,
        Command::Orphans => {
            for rel in orphans(&ctx.out)? {
                println!("{rel}");
            }
            return Ok(());
        }
    };
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
