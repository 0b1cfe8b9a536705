//! Octave-band envelopes and energy decay curves of one simulated response.

use fadein::signal::{octave_filterbank, power_scale, rms_envelope, schroeder_edf, DEFAULT_BAND_CENTERS};
use fadein::sim::{chain_response, RoomChain};

fn main() -> fadein::Result<()> {
    let chain = RoomChain::new(vec![20.0, 8.0], 48_000, 48_000, 42)?;
    let rir = chain_response(&chain)?;
    let w = fadein::signal::default_window_len(rir.len());
    println!("{} samples, window {w} samples", rir.len());

    for band in octave_filterbank(&rir, &DEFAULT_BAND_CENTERS)? {
        let env = rms_envelope(&band, w)?;
        let edf = schroeder_edf(&band, true)?;
        let compressed = power_scale(&env, 0.5)?;
        let peak = env.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let t20 = edf.values.iter().position(|&v| v < 0.01).map(|i| i as f64 / 48_000.0);
        println!(
            "{:>6} Hz  energy {:>10.1}  envelope peak at point {:>3}  -20 dB EDC at {:>6}  sqrt-envelope max {:.3}",
            band.band.unwrap_or(0.0),
            band.energy(),
            peak.0,
            t20.map_or("-".to_string(), |t| format!("{t:.3} s")),
            compressed.iter().cloned().fold(0.0, f64::max)
        );
    }
    Ok(())
}
