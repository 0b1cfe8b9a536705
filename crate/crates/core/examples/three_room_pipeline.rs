//! Simulate the three-room preset, fit it in both modes and print the common
//! decay times and per-position summed envelope RMSE.
//!
//!     cargo run --release --example three_room_pipeline -- [positions] [out_dir]

use std::time::Instant;

use fadein::cli::{cmd_fit, cmd_metrics, cmd_synth, simulate_to_dir, FitOptions, SimulationConfig, PARAMS_FILE};
use fadein::decay::kernel_to_decay_rate;
use fadein::slope_fit::Mode;

fn main() -> fadein::Result<()> {
    let mut args = std::env::args().skip(1);
    let positions: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(9);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fadein_three_room"));

    let start = Instant::now();
    let dataset = out.join("dataset");
    let manifest = simulate_to_dir(&SimulationConfig::three_room(positions, 48_000, 7), &dataset)?;
    println!("simulated {} positions in {:.1?}", manifest.positions.len(), start.elapsed());

    for mode in [Mode::FadeIn, Mode::PosOnly] {
        let t = Instant::now();
        let fit_dir = out.join(format!("fit_{mode}"));
        let opts = FitOptions { mode, ..FitOptions::default() };
        let fit = cmd_fit(&dataset, &opts, &fit_dir)?;
        println!("\n{mode}: fitted in {:.1?}", t.elapsed());
        for band in &fit.params.bands {
            let rates: Vec<String> = band
                .decay_times_s
                .iter()
                .map(|&t| format!("{:.1}", kernel_to_decay_rate(t)))
                .collect();
            println!("  {:>6} Hz  decay rates [{}] 1/s", band.center_hz, rates.join(", "));
        }

        let params = fit_dir.join(PARAMS_FILE);
        cmd_synth(&params, None, 1, &fit_dir.join("synth"))?;
        let rows = cmd_metrics(&params, &dataset, None, 1, &fit_dir.join("metrics.csv"))?;
        for row in rows.iter().filter(|r| r.band.is_none()) {
            println!(
                "  {:<10} summed RMSE {:.4}  C50 ref {:6.2} dB  model {:6.2} dB",
                row.position_id, row.summed_rmse, row.c50_ref, row.c50_model
            );
        }
    }
    println!("\noutputs in {} ({:.1?} total)", out.display(), start.elapsed());
    Ok(())
}
