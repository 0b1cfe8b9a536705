//! Ensemble envelope of simulated room-to-room responses next to the closed
//! forms: the difference of exponentials at the room decay rates, and the
//! exact ensemble RMS of the discrete simulator.

use fadein::signal::envelope_time;
use fadein::sim::{analytic_envelope, ensemble_rms_envelope, simulate_ensemble_envelope};

fn main() -> fadein::Result<()> {
    let (fs, len, w) = (48_000u32, 24_000, 240);
    let rates = [20.0, 5.0];
    let sim = simulate_ensemble_envelope(&rates, len, fs, w, 400, 1)?;
    let times: Vec<f64> = (0..sim.len()).map(|m| envelope_time(m, w) / fs as f64).collect();
    let diff = analytic_envelope(&rates, &times)?;
    let rms = ensemble_rms_envelope(&rates, &times, fs)?;

    let norm = |v: &[f64]| {
        let peak = v.iter().cloned().fold(0.0, f64::max);
        v.iter().map(|x| x / peak).collect::<Vec<_>>()
    };
    let (sim_n, diff_n, rms_n) = (norm(&sim), norm(&diff), norm(&rms));
    println!("{:>8} {:>10} {:>12} {:>12}", "t [s]", "simulated", "rms oracle", "difference");
    for m in (0..sim.len()).step_by(5) {
        println!("{:>8.4} {:>10.4} {:>12.4} {:>12.4}", times[m], sim_n[m], rms_n[m], diff_n[m]);
    }
    let argmax = |v: &[f64]| times[v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    println!(
        "peaks: simulated {:.4} s, rms oracle {:.4} s, difference of exponentials {:.4} s",
        argmax(&sim),
        argmax(&rms),
        argmax(&diff)
    );
    Ok(())
}
