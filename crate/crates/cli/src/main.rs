//! `qcatn`: phantom generation, training, q-space synthesis and evaluation.
//!
//! Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical divergence,
//! 4 format or compatibility.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FitSection, PhantomSection, SchemeSection, TrainOverrides};
use error::{CliResult, EXIT_OK, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "qcatn", version, about = "q-space conditioned DWI synthesis on a tensor phantom")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shells plus directions per shell, or FSL gradient tables.
#[derive(Debug, Args)]
struct SchemeArgs {
    /// Comma-separated b-values; a b = 0 point is always included.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["bvals", "bvecs"])]
    shells: Option<Vec<f64>>,
    /// Directions per non-zero shell.
    #[arg(long, conflicts_with_all = ["bvals", "bvecs"])]
    dirs: Option<usize>,
    #[arg(long, requires = "bvecs")]
    bvals: Option<PathBuf>,
    #[arg(long, requires = "bvals")]
    bvecs: Option<PathBuf>,
}

impl SchemeArgs {
    fn section(&self, default: Option<SchemeSection>) -> Option<SchemeSection> {
        if self.shells.is_none() && self.dirs.is_none() && self.bvals.is_none() {
            return default;
        }
        Some(SchemeSection {
            shells: self.shells.clone(),
            dirs: self.dirs,
            bvals: self.bvals.clone(),
            bvecs: self.bvecs.clone(),
        })
    }
}

#[derive(Debug, Args)]
struct OverrideArgs {
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base width of both networks.
    #[arg(long)]
    base_channels: Option<usize>,
    /// Continue from `<out>/latest` when it exists.
    #[arg(long)]
    resume: bool,
}

impl OverrideArgs {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            seed: self.seed,
            base_channels: self.base_channels,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Shell fitted together with the b = 0 points (default: lowest non-zero).
    #[arg(long)]
    shell: Option<f64>,
    /// Use the b0 structural channel in place of stored b = 0 slices.
    #[arg(long)]
    b0_from_structurals: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a phantom dataset container (defaults: 64x64, shells 0,1000,2000, 30 dirs).
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Rician noise scale in normalized intensity units.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset container.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with optional [train], [generator], [discriminator] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Synthesize one slice per q-space point from a checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container whose structural channels are the inputs.
        #[arg(long)]
        structurals: PathBuf,
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long, default_value_t = 16)]
        chunk: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diffusion tensors and write FA, MD, residual and mask maps.
    FitDti {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two containers of the same kind; `b` is the reference.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated map or slice names (default: all shared).
        #[arg(long, value_delimiter = ',')]
        maps: Option<Vec<String>>,
        /// JSON report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a map (`fa`, `md`, `b0`, `dwi_<k>`, ...) as 8-bit grayscale PNG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        map: String,
        /// Adds reference and absolute-error panels.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run phantom, train, synth, fit-dti, metrics and plots from one TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom {
            size,
            seed,
            noise,
            scheme,
            out,
        } => {
            let section = PhantomSection {
                size,
                seed,
                noise_sigma: noise,
            };
            let scheme = scheme.section(Some(SchemeSection::default())).expect("default scheme");
            commands::cmd_phantom(&section, &scheme, &out).map(|_| ())
        }
        Command::Train {
            data,
            out,
            config,
            overrides,
        } => commands::cmd_train(&data, &out, config.as_deref(), &overrides.overrides(), overrides.resume),
        Command::Synth {
            checkpoint,
            structurals,
            scheme,
            chunk,
            out,
        } => {
            let scheme = scheme
                .section(None)
                .ok_or_else(|| error::CliError::validation("synth needs --shells/--dirs or --bvals/--bvecs"))?;
            commands::cmd_synth(&checkpoint, &structurals, &scheme, chunk, &out)
        }
        Command::FitDti { data, fit, out } => {
            let section = FitSection {
                shell: fit.shell,
                b0_from_structurals: fit.b0_from_structurals,
            };
            commands::cmd_fit_dti(&data, &section, &out)
        }
        Command::Metrics { a, b, maps, out } => commands::cmd_metrics(&a, &b, maps.as_deref(), out.as_deref()),
        Command::Plot {
            input,
            map,
            reference,
            out,
        } => commands::cmd_plot(&input, &map, reference.as_deref(), &out),
        Command::Run { config, overrides } => commands::cmd_run(&config, &overrides.overrides(), overrides.resume),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
