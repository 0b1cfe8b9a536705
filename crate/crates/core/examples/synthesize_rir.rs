//! Resynthesize a broadband response from per-band envelopes and write it
//! as a WAV file.
//!
//!     cargo run --example synthesize_rir -- out.wav

use fadein::cli::write_wav;
use fadein::metrics::c50;
use fadein::rng::derive_seed;
use fadein::signal::{envelope_time, DEFAULT_BAND_CENTERS};
use fadein::synthesis::{synth_band, synth_broadband};

fn main() -> fadein::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "synthesized.wav".into());
    let (fs, w, points) = (48_000u32, 240, 200);
    let bands = DEFAULT_BAND_CENTERS
        .iter()
        .enumerate()
        .map(|(b, &fc)| {
            // Higher bands decay faster; every band fades in over ~50 ms.
            let fast = 30.0;
            let slow = 4.0 + b as f64;
            let env: Vec<f64> = (0..points)
                .map(|m| {
                    let t = envelope_time(m, w) / fs as f64;
                    ((-slow * t).exp() - (-fast * t).exp()).max(0.0)
                })
                .collect();
            synth_band(&env, fc, w, fs, derive_seed(1, &[b as u64]))
        })
        .collect::<fadein::Result<Vec<_>>>()?;
    let mut rir = synth_broadband(&bands)?;
    rir.position_id = "synthesized".into();
    println!("{} samples, C50 {:.2} dB", rir.len(), c50(&rir)?);
    write_wav(std::path::Path::new(&path), &rir)?;
    println!("wrote {path}");
    Ok(())
}
