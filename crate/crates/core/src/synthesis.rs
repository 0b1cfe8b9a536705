//! Resynthesis of RIRs from band envelopes and shaped Gaussian noise.

use crate::rng::gaussian_noise;
use crate::signal::{envelope_time, BandFilter, Rir};
use crate::{Error, Result};

/// Envelope upsampled to `len` samples: linear between window centers, held
/// before the first and after the last center.
pub fn upsample_envelope(envelope: &[f64], window_len: usize, len: usize) -> Vec<f64> {
    let n = envelope.len();
    if n == 0 {
        return vec![0.0; len];
    }
    let w = window_len as f64;
    (0..len)
        .map(|i| {
            // Fractional envelope index of sample i.
            let pos = i as f64 / w - 0.5;
            if pos <= 0.0 {
                envelope[0]
            } else if pos >= (n - 1) as f64 {
                envelope[n - 1]
            } else {
                let m = pos.floor() as usize;
                let frac = pos - m as f64;
                envelope[m] + frac * (envelope[m + 1] - envelope[m])
            }
        })
        .collect()
}

/// Band-limited, unit-RMS noise for the band around `band_center`.
pub fn band_noise(len: usize, band_center: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    let filter = BandFilter::design(band_center, sample_rate)?;
    let mut noise = filter.filter_zero_phase(&gaussian_noise(len, seed));
    let rms = (noise.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        noise.iter_mut().for_each(|x| *x /= rms);
    }
    Ok(noise)
}

/// Band RIR of `envelope.len() * window_len` samples: the upsampled envelope
/// times filtered unit-RMS noise.
pub fn synth_band(
    envelope: &[f64],
    band_center: f64,
    window_len: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Rir> {
    if window_len == 0 {
        return Err(Error::InvalidWindow("window length must be positive".into()));
    }
    if let Some(v) = envelope.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("envelope value {v} is not a nonnegative number")));
    }
    let len = envelope.len() * window_len;
    let noise = band_noise(len, band_center, sample_rate, seed)?;
    let gain = upsample_envelope(envelope, window_len, len);
    let samples = noise.iter().zip(&gain).map(|(n, g)| n * g).collect();
    let mut rir = Rir::new(samples, sample_rate, "")?;
    rir.band = Some(band_center);
    Ok(rir)
}

/// Sample-wise sum of band RIRs.
pub fn synth_broadband(band_rirs: &[Rir]) -> Result<Rir> {
    let first = band_rirs
        .first()
        .ok_or_else(|| Error::Shape("no band RIRs given".into()))?;
    if let Some(bad) = band_rirs
        .iter()
        .find(|r| r.len() != first.len() || r.sample_rate != first.sample_rate)
    {
        return Err(Error::Shape(format!(
            "band RIR of {} samples at {} Hz does not match {} samples at {} Hz",
            bad.len(),
            bad.sample_rate,
            first.len(),
            first.sample_rate
        )));
    }
    let mut samples = vec![0.0; first.len()];
    for r in band_rirs {
        for (s, x) in samples.iter_mut().zip(&r.samples) {
            *s += x;
        }
    }
    Ok(Rir {
        samples,
        sample_rate: first.sample_rate,
        position_id: first.position_id.clone(),
        band: None,
    })
}

/// Envelope sample instant of point `m` in seconds, matching the upsampler.
pub fn envelope_time_s(m: usize, window_len: usize, sample_rate: u32) -> f64 {
    envelope_time(m, window_len) / sample_rate as f64
}
