//! Envelope error and speech clarity.

use crate::signal::Rir;
use crate::{Error, Result};

/// Root mean square difference over points `t >= skip_head`.
pub fn envelope_rmse(fitted: &[f64], reference: &[f64], skip_head: usize) -> Result<f64> {
    if fitted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "fitted envelope has {} points, reference {}",
            fitted.len(),
            reference.len()
        )));
    }
    if skip_head >= fitted.len() {
        return Err(Error::InvalidParameter(format!(
            "skip_head {skip_head} leaves no points of {}",
            fitted.len()
        )));
    }
    let n = fitted.len() - skip_head;
    let sum: f64 = fitted[skip_head..]
        .iter()
        .zip(&reference[skip_head..])
        .map(|(f, r)| (r - f) * (r - f))
        .sum();
    Ok((sum / n as f64).sqrt())
}

/// Index of the first sample of the late part: `round(0.05 * fs)`.
pub fn c50_boundary(sample_rate: u32) -> usize {
    (0.05 * sample_rate as f64).round() as usize
}

/// Early-to-late energy ratio in dB with a 50 ms split. Returns
/// `f64::INFINITY` when there is no late energy.
pub fn c50(rir: &Rir) -> Result<f64> {
    let split = c50_boundary(rir.sample_rate);
    if rir.len() < split {
        return Err(Error::InvalidParameter(format!(
            "RIR of {} samples is shorter than 50 ms ({split} samples)",
            rir.len()
        )));
    }
    let energy = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>();
    let early = energy(&rir.samples[..split]);
    let late = energy(&rir.samples[split..]);
    if early == 0.0 && late == 0.0 {
        return Err(Error::DegenerateInput("all-zero RIR".into()));
    }
    if late == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (early / late).log10())
}

/// `c50(reference) - c50(synthesized)`.
pub fn c50_error(reference: &Rir, synthesized: &Rir) -> Result<f64> {
    Ok(c50(reference)? - c50(synthesized)?)
}
