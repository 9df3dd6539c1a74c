use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xpose::cli::{self, CliError, RunConfig};
use xpose::xform::TransformSpec;

#[derive(Parser)]
#[command(name = "xpose", version, about = "Transfer attacks under transpose and rotation on a toy model zoo")]
struct Args {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) the dataset into the output directory.
    GenData,
    /// Train zoo models and write checkpoints.
    Train {
        /// Train only this model.
        #[arg(long)]
        model: Option<String>,
    },
    /// Craft adversarial images and cache them.
    Attack {
        #[arg(long, conflicts_with = "ensemble")]
        whitebox: Option<String>,
        /// Comma-separated ensemble members.
        #[arg(long, value_delimiter = ',')]
        ensemble: Option<Vec<String>>,
        /// Craft only this configured attack.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Transfer tables for the clean, single, ensemble and rotate1 protocols.
    Eval {
        /// identity, transpose, fliplr or rotate:<deg>
        #[arg(long)]
        transform: Option<TransformSpec>,
    },
    /// Rotation sweeps.
    Sweep {
        #[arg(long)]
        stride: Option<u32>,
    },
    /// Feature-map difference grids.
    Featdiff {
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Collect reports and a ratio summary into a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages in order.
    Pipeline,
}

fn run(args: Args) -> Result<(), CliError> {
    let path = args.config.ok_or_else(|| CliError::Usage("--config <FILE> is required".into()))?;
    let cfg = RunConfig::load(&path)?;
    match args.command {
        Command::GenData => cli::gen_data(&cfg),
        Command::Train { model } => cli::train(&cfg, model.as_deref()),
        Command::Attack { whitebox, ensemble, attack } => cli::attack(&cfg, whitebox.as_deref(), ensemble.as_deref(), attack.as_deref()),
        Command::Eval { transform } => cli::eval(&cfg, transform),
        Command::Sweep { stride } => cli::sweep(&cfg, stride),
        Command::Featdiff { layer, k } => cli::featdiff(&cfg, layer.as_deref(), k),
        Command::Report { out } => cli::report(&cfg, &out),
        Command::Pipeline => cli::pipeline(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", CliError::Usage(e.kind().to_string()).json_line());
            return ExitCode::from(1);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
