use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldc_cli::commands::{cmd_ablate, cmd_gradcheck, cmd_project, cmd_run, Ablation};
use ldc_cli::{CliError, Overrides};

#[derive(Parser)]
#[command(name = "ldc", version, about = "Few-shot class-incremental calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `0,3,5..8`, overriding `seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads; `LDC_DETERMINISTIC=1` forces one.
    #[arg(long)]
    threads: Option<usize>,
}

impl From<Common> for Overrides {
    fn from(c: Common) -> Self {
        Overrides { config: c.config, out: c.out, seeds: c.seeds, threads: c.threads }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell and write results.jsonl and accuracy.csv.
    Run(Common),
    /// Run one ablation factorial and write ablation_<which>.csv.
    Ablate {
        /// sampler, recurrent, divergence, outlier or memory
        which: Ablation,
        #[command(flatten)]
        common: Common,
    },
    /// Export a 2-D PCA projection of real, biased and calibrated features.
    Project {
        /// Embedding files to project instead of generated sets.
        #[arg(long)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let o = Overrides::from(common);
            let out = cmd_run(&o.resolve()?, o.threads())?;
            println!("wrote {} and {}", out.jsonl.display(), out.table.display());
        }
        Command::Ablate { which, common } => {
            let o = Overrides::from(common);
            let path = cmd_ablate(which, &o.resolve()?, o.threads())?;
            println!("wrote {}", path.display());
        }
        Command::Project { input, common } => {
            let o = Overrides::from(common);
            let (path, fraction) = cmd_project(&o.resolve()?, &input)?;
            println!("wrote {} (variance fraction {fraction:.4})", path.display());
        }
        Command::Gradcheck { seed } => {
            cmd_gradcheck(seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
