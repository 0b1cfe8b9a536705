use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fadein::cli::{cmd_fit, cmd_metrics, cmd_simulate, cmd_synth, FitOptions, PARAMS_FILE};
use fadein::signal::DEFAULT_BAND_CENTERS;
use fadein::slope_fit::{Mode, DEFAULT_SKIP_MS};

#[derive(Parser)]
#[command(name = "fadein", version, about = "Common-slope reverberation fitting with fade-in")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate room-to-room responses from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit common decay times and amplitudes to a directory of WAV files.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BAND_CENTERS.to_vec())]
        bands: Vec<f64>,
        /// One value for all bands or a comma-separated value per band.
        #[arg(long, value_delimiter = ',', default_value = "3")]
        k_per_band: Vec<usize>,
        #[arg(long, default_value = "fadein")]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_SKIP_MS)]
        skip_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        window_len: Option<usize>,
    },
    /// Synthesize broadband responses from a parameter file.
    Synth {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated position ids; all positions when omitted.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        ids: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a parameter file against reference responses.
    Metrics {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        ids: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> fadein::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let manifest = cmd_simulate(&config, &out)?;
            eprintln!("wrote {} responses to {}", manifest.positions.len(), out.display());
        }
        Command::Fit { dataset, out, bands, k_per_band, mode, skip_ms, seed, window_len } => {
            let opts = FitOptions { bands, k_per_band, mode, skip_ms, seed, window_len };
            let fit = cmd_fit(&dataset, &opts, &out)?;
            let failed = fit.fits.iter().flat_map(|f| &f.bands).filter(|b| !b.converged).count();
            eprintln!("fitted {} positions, wrote {}", fit.fits.len(), out.join(PARAMS_FILE).display());
            if failed > 0 {
                eprintln!("warning: {failed} band fits did not converge (see residuals.csv)");
            }
        }
        Command::Synth { params, out, ids, seed } => {
            let meta = cmd_synth(&params, ids.as_deref(), seed, &out)?;
            eprintln!("wrote {} responses to {}", meta.positions.len(), out.display());
        }
        Command::Metrics { params, dataset, out, ids, seed } => {
            let rows = cmd_metrics(&params, &dataset, ids.as_deref(), seed, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
