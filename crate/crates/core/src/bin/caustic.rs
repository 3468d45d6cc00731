//! Command-line front end: fit sources, design lenses, render, score.
//!
//! Exit codes: 0 success (and converged, for the optimizing commands),
//! 1 input or configuration error, 2 optimization stopped before the
//! gradient tolerance.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caustic_core::error::{Error, Result};
use caustic_core::harness::{
    emit_design_outputs, emit_fit_outputs, error_map, error_stats, exit_code_for, metrics,
    metrics_quantized, run_design, run_fit, run_oracle_render, run_render, RunConfig,
};
use caustic_core::io::{self, BitDepth};

#[derive(Parser)]
#[command(name = "caustic", version, about = "Caustic lens design with extended light sources")]
struct Cli {
    /// Worker threads for rendering (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a point-emitter source model to reference caustic images.
    FitSource {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Optimize the lens back surface against a target image.
    DesignLens {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured source table.
        #[arg(long)]
        source_table: Option<PathBuf>,
        /// Override the configured target image.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a source table through a lens OBJ.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_table: PathBuf,
        #[arg(long)]
        lens: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reference render with a dense emitter lattice standing in for the
    /// extended source.
    OracleRender {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lens: PathBuf,
        /// Lattice side; the oracle uses grid x grid emitters.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Gaussian center weighting instead of uniform intensities.
        #[arg(long)]
        center_weighted: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print MAE and PSNR between two PGM images.
    Metrics {
        reference: PathBuf,
        test: PathBuf,
        /// Snap both images to a sample grid first (8 or 16 bits).
        #[arg(long)]
        quantized: Option<u8>,
    },
    /// Write the absolute-difference image between two PGMs.
    Errormap {
        reference: PathBuf,
        test: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::FitSource { config, output } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = output {
                cfg.paths.output_dir = dir;
            }
            let outcome = run_fit(&cfg)?;
            emit_fit_outputs(&cfg, &outcome)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "fit: {:?} after {} iterations, E {:.6e} -> {:.6e}",
                outcome.result.stop,
                outcome.result.iterations,
                outcome.initial_energy,
                outcome.result.energy
            );
            Ok(ExitCode::from(exit_code_for(outcome.result.stop)))
        }
        Command::DesignLens { config, source_table, target, output } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(p) = source_table {
                cfg.paths.source_table = Some(p);
            }
            if let Some(p) = target {
                cfg.paths.target = Some(p);
            }
            if let Some(dir) = output {
                cfg.paths.output_dir = dir;
            }
            let outcome = run_design(&cfg)?;
            emit_design_outputs(&cfg, &outcome)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "design: {:?} after {} iterations, E {:.6e} -> {:.6e}",
                outcome.result.stop,
                outcome.result.iterations,
                outcome.initial_energy,
                outcome.result.energy
            );
            Ok(ExitCode::from(exit_code_for(outcome.result.stop)))
        }
        Command::Render { config, source_table, lens, output } => {
            let cfg = RunConfig::load(&config)?;
            let sources = io::read_source_table(&source_table)?;
            let lens = io::read_lens_obj(
                &lens,
                cfg.scene.front_z,
                cfg.scene.refractive_index,
            )?;
            let (gray, flux, report) = run_render(&cfg, &sources, &lens)?;
            std::fs::create_dir_all(&output)?;
            io::write_pgm(&output.join("render.pgm"), &gray, BitDepth::Eight)?;
            io::write_pfm(&output.join("render.pfm"), &flux)?;
            println!(
                "render: emitted {:.6e}, escaped {:.6e}, lost {:.6e}",
                report.emitted, report.escaped, report.lost_flux
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleRender { config, lens, grid, center_weighted, output } => {
            let cfg = RunConfig::load(&config)?;
            let lens_path = lens.display().to_string();
            let lens = io::read_lens_obj(
                &lens,
                cfg.scene.front_z,
                cfg.scene.refractive_index,
            )?;
            let (gray, _report) = run_oracle_render(&cfg, &lens, grid, center_weighted)?;
            std::fs::create_dir_all(&output)?;
            let image = output.join("oracle.pgm");
            io::write_pgm(&image, &gray, BitDepth::Sixteen)?;
            io::write_sidecar(
                &output.join("oracle.txt"),
                &[
                    ("generator", "dense emitter lattice".to_string()),
                    ("grid", grid.to_string()),
                    ("source_side", format!("{}", cfg.scene.b)),
                    (
                        "profile",
                        if center_weighted { "center-weighted" } else { "uniform" }.to_string(),
                    ),
                    ("lens", lens_path),
                    ("gamma", format!("{}", cfg.image.gamma)),
                ],
            )?;
            println!("oracle render written to {}", image.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { reference, test, quantized } => {
            let p = io::read_pgm(&reference)?;
            let q = io::read_pgm(&test)?;
            let m = match quantized {
                None => metrics(&p, &q)?,
                Some(8) => metrics_quantized(&p, &q, BitDepth::Eight)?,
                Some(16) => metrics_quantized(&p, &q, BitDepth::Sixteen)?,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "quantized depth must be 8 or 16, got {other}"
                    )))
                }
            };
            println!("MAE {:.6e}", m.mae);
            if m.psnr.is_finite() {
                println!("PSNR {:.4} dB", m.psnr);
            } else {
                println!("PSNR inf dB");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Errormap { reference, test, output } => {
            let p = io::read_pgm(&reference)?;
            let q = io::read_pgm(&test)?;
            let map = error_map(&p, &q)?;
            io::write_pgm(&output, &map, BitDepth::Eight)?;
            let (mean, max) = error_stats(&map);
            io::write_sidecar(
                &output.with_extension("txt"),
                &[
                    ("mean_abs_error", format!("{mean:.6e}")),
                    ("max_abs_error", format!("{max:.6e}")),
                ],
            )?;
            println!("error map written to {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
