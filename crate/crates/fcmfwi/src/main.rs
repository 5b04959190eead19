use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcmfwi::{app, AppResult};

#[derive(Parser)]
#[command(name = "fcmfwi", version, about = "Embedded-domain B-spline full-waveform inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set discretization.p=3`
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute reference traces with the defects on a finer mesh
    Synthesize(Common),
    /// Forward runs on the inversion mesh
    Forward {
        #[command(flatten)]
        common: Common,
        /// γ grid file; homogeneous if absent
        #[arg(long)]
        gamma: Option<PathBuf>,
        /// Include the defects in the geometry
        #[arg(long)]
        with_defects: bool,
    },
    /// Two-stage inversion against the reference traces
    Invert(Common),
    /// Forward convergence study over a mesh family
    ConvergenceStudy(Common),
    /// Refinement indicator of a level-0 γ grid file
    Indicator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gamma: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synthesize(c) | Command::Invert(c) | Command::ConvergenceStudy(c) => c,
            Command::Forward { common, .. } | Command::Indicator { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> AppResult<()> {
    let common = cli.command.common();
    let loaded = app::load(&common.config, &common.overrides)?;
    let out = &loaded.config.output;
    let env = env_logger::Env::default().default_filter_or(out.log.as_str());
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
    if out.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(out.threads).build_global().ok();
    }
    match &cli.command {
        Command::Synthesize(_) => app::synthesize(&loaded).map(drop),
        Command::Forward { gamma, with_defects, .. } => app::forward(&loaded, gamma.as_deref(), *with_defects).map(drop),
        Command::Invert(_) => app::invert(&loaded).map(drop),
        Command::ConvergenceStudy(_) => app::convergence_study(&loaded).map(drop),
        Command::Indicator { gamma, .. } => app::indicator(&loaded, gamma).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(u8::from(usage));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
