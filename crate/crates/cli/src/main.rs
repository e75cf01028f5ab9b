use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use formtwin::manifest::RunManifest;
use formtwin::pipeline::{self, ControlArgs, Ctx};
use formtwin_core::{Error, Result};

/// Adaptive digital twin for incremental sheet forming: dataset generation,
/// reduced-order model training, closed-loop toolpath control, reporting.
#[derive(Parser)]
#[command(name = "formtwin", version, arg_required_else_help = true)]
struct Cli {
    /// Run manifest (TOML). Without this flag, `./formtwin.toml` is used if
    /// present, otherwise the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    /// Override the subcommand's primary seed (doe plan seed, plant seed
    /// base, training seed, validation replicate base, or control plant
    /// seed, depending on the subcommand).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory (overrides the manifest's `paths.out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    /// Print the built-in default manifest as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the design-of-experiments toolpath plan.
    Doe,
    /// Run the synthetic plant over the plan to produce the episode dataset.
    Simulate,
    /// Fit the deformation modes and the toolpath polynomial basis.
    FitReduction,
    /// Train the lifted linear predictor on the reduced dataset.
    Train,
    /// Score one-step predictions on held-out episodes over reshuffled
    /// evaluation replicates.
    Validate,
    /// Run the receding-horizon controller against the plant and record a
    /// trace.
    Control {
        /// Update the model's input map online from prediction residuals.
        #[arg(long)]
        adapt: bool,
        /// JSON array with one target deflection per tracker, mm. Defaults
        /// to the scaled saturation profile.
        #[arg(long, value_name = "FILE")]
        target_file: Option<PathBuf>,
        /// Fraction of the saturation profile to aim for.
        #[arg(long)]
        target_scale: Option<f64>,
        /// Plant yield drift factor (1.0 = nominal).
        #[arg(long)]
        drift: Option<f64>,
        /// Termination tolerance on max deviation, mm.
        #[arg(long)]
        tol_mm: Option<f64>,
        /// Cycle budget.
        #[arg(long)]
        max_cycles: Option<usize>,
        /// Where to write the trace (defaults to the manifest's trace path).
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Render CSV tables and SVG plots from recorded traces.
    Report,
}

fn load_manifest(explicit: Option<&Path>) -> Result<RunManifest> {
    match explicit {
        Some(path) => RunManifest::load(path),
        None => {
            let local = Path::new("formtwin.toml");
            if local.exists() {
                RunManifest::load(local)
            } else {
                Ok(RunManifest::default())
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let manifest = load_manifest(cli.manifest.as_deref())?;
    let ctx = Ctx::new(manifest, cli.out_dir.as_deref(), cli.verbose)?;
    match cli.command.expect("clap enforces a subcommand") {
        Command::Doe => pipeline::cmd_doe(&ctx, cli.seed),
        Command::Simulate => pipeline::cmd_simulate(&ctx, cli.seed),
        Command::FitReduction => pipeline::cmd_fit_reduction(&ctx),
        Command::Train => pipeline::cmd_train(&ctx, cli.seed),
        Command::Validate => pipeline::cmd_validate(&ctx, cli.seed),
        Command::Control {
            adapt,
            target_file,
            target_scale,
            drift,
            tol_mm,
            max_cycles,
            trace,
        } => pipeline::cmd_control(
            &ctx,
            &ControlArgs {
                adapt,
                target_file,
                target_scale,
                drift,
                tol_mm,
                max_cycles,
                trace_out: trace,
                seed: cli.seed,
            },
        ),
        Command::Report => pipeline::cmd_report(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.print_defaults {
        match RunManifest::default().to_toml() {
            Ok(text) => {
                print!("{text}");
                std::process::exit(0);
            }
            Err(e) => {
                eprintln!("formtwin: error: {e}");
                std::process::exit(2);
            }
        }
    }
    if cli.command.is_none() {
        eprintln!("formtwin: error: a subcommand is required (try --help)");
        std::process::exit(2);
    }
    match execute(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("formtwin: error: {e}");
            let code = match e {
                Error::Numerical(_) => 3,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}
