//! Statistical coupled-room simulator.
//!
//! A single room responds with exponentially decaying Gaussian noise
//! `exp(-delta t) n(t)`. A room-to-room path is the convolution of the room
//! responses along it, ignoring energy that flows back. Two closed forms go
//! with it:
//!
//! * [`analytic_envelope`]: the convolution of the exponential envelopes,
//!   `[exp(-d1 t) - exp(-d2 t)] / (d2 - d1)` for two rooms and its
//!   partial-fraction generalization for more.
//! * [`ensemble_rms_envelope`]: the exact ensemble RMS of the simulated
//!   responses. Independent noises add in power, so this is the square root
//!   of the envelope convolution taken at the doubled (energy) rates.

use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::rng::{derive_seed, gaussian_noise};
use crate::signal::{rms_envelope, Rir};
use crate::{Error, Result};

/// Amplitude decay rates (1/s) of the three-room scenario: R1 holds the
/// source, R2 is the most reverberant room and R3 lies in between.
pub const THREE_ROOM_RATES: [f64; 3] = [20.0, 5.0, 10.0];

/// A path through a sequence of rooms.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomChain {
    /// Amplitude decay rate of each room along the path, in 1/s.
    pub decay_rates: Vec<f64>,
    /// Response length in samples.
    pub length: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl RoomChain {
    pub fn new(decay_rates: Vec<f64>, length: usize, sample_rate: u32, seed: u64) -> Result<Self> {
        let chain = Self {
            decay_rates,
            length,
            sample_rate,
            seed,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_rates.is_empty() {
            return Err(Error::InvalidParameter("room chain has no rooms".into()));
        }
        if let Some(d) = self.decay_rates.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter(format!("decay rate {d} must be positive")));
        }
        if self.length == 0 || self.sample_rate == 0 {
            return Err(Error::InvalidParameter("length and sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Seed of room `i`: the chain seed for the first room, derived seeds after.
    pub fn room_seed(&self, i: usize) -> u64 {
        if i == 0 {
            self.seed
        } else {
            derive_seed(self.seed, &[i as u64])
        }
    }
}

/// `exp(-delta t)` at `t_samples / fs` seconds.
pub fn room_envelope(delta: f64, t_samples: f64, sample_rate: f64) -> f64 {
    (-delta * t_samples / sample_rate).exp()
}

/// `exp(-delta t / fs) n(t)` with standard Gaussian `n`.
pub fn gen_room_response(delta: f64, length: usize, sample_rate: u32, seed: u64) -> Result<Rir> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("decay rate {delta} must be positive")));
    }
    let fs = sample_rate as f64;
    let samples = gaussian_noise(length, seed)
        .into_iter()
        .enumerate()
        .map(|(t, n)| room_envelope(delta, t as f64, fs) * n)
        .collect();
    Rir::new(samples, sample_rate, "")
}

/// Linear convolution of `a` and `b`, truncated to `out_len` samples.
pub fn convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let full = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, o) in out.iter_mut().enumerate().take(full) {
            let lo = i.saturating_sub(b.len() - 1);
            let hi = i.min(a.len() - 1);
            *o = (lo..=hi).map(|j| a[j] * b[i - j]).sum();
        }
        return out;
    }
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { fa[i].re * scale } else { 0.0 })
        .collect()
}

/// Convolves independently seeded room responses along the chain.
pub fn chain_response(chain: &RoomChain) -> Result<Rir> {
    chain.validate()?;
    let mut acc = gen_room_response(chain.decay_rates[0], chain.length, chain.sample_rate, chain.room_seed(0))?
        .samples;
    for (i, &delta) in chain.decay_rates.iter().enumerate().skip(1) {
        let room = gen_room_response(delta, chain.length, chain.sample_rate, chain.room_seed(i))?;
        acc = convolve(&acc, &room.samples, chain.length);
    }
    Rir::new(acc, chain.sample_rate, "")
}

fn check_distinct(decay_rates: &[f64]) -> Result<()> {
    if decay_rates.is_empty() {
        return Err(Error::InvalidParameter("no decay rates given".into()));
    }
    if let Some(d) = decay_rates.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidParameter(format!("decay rate {d} must be positive")));
    }
    for (i, a) in decay_rates.iter().enumerate() {
        for b in &decay_rates[i + 1..] {
            if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()) {
                return Err(Error::NearSingular(format!(
                    "decay rates {a} and {b} coincide; perturb one of them"
                )));
            }
        }
    }
    Ok(())
}

/// Convolution of the room envelopes `exp(-delta_i t)`, `t` in seconds:
/// `sum_i exp(-delta_i t) prod_{j != i} 1 / (delta_j - delta_i)`.
/// Negative times evaluate to 0.
pub fn analytic_envelope(decay_rates: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    check_distinct(decay_rates)?;
    let weights: Vec<f64> = decay_rates
        .iter()
        .enumerate()
        .map(|(i, di)| {
            decay_rates
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, dj)| 1.0 / (dj - di))
                .product()
        })
        .collect();
    Ok(times
        .iter()
        .map(|&t| {
            if t < 0.0 {
                return 0.0;
            }
            let v: f64 = weights
                .iter()
                .zip(decay_rates)
                .map(|(w, d)| w * (-d * t).exp())
                .sum();
            v.max(0.0)
        })
        .collect())
}

/// Exact ensemble RMS of [`chain_response`] at `t` seconds:
/// `sqrt(fs^(k-1) * analytic_envelope(2 delta, t))` for `k` rooms.
pub fn ensemble_rms_envelope(decay_rates: &[f64], times: &[f64], sample_rate: u32) -> Result<Vec<f64>> {
    let doubled: Vec<f64> = decay_rates.iter().map(|d| 2.0 * d).collect();
    let gain = (sample_rate as f64).powi(decay_rates.len() as i32 - 1);
    Ok(analytic_envelope(&doubled, times)?
        .into_iter()
        .map(|v| (gain * v).sqrt())
        .collect())
}

/// Pointwise RMS over `realizations` of the RMS envelopes of chain responses
/// with seeds derived from `seed`. Realizations run in parallel; the result
/// does not depend on the thread count.
pub fn simulate_ensemble_envelope(
    decay_rates: &[f64],
    length: usize,
    sample_rate: u32,
    window_len: usize,
    realizations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let envelopes = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let chain = RoomChain::new(
                decay_rates.to_vec(),
                length,
                sample_rate,
                derive_seed(seed, &[r as u64]),
            )?;
            rms_envelope(&chain_response(&chain)?, window_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = length / window_len;
    let mut power = vec![0.0; n];
    for env in &envelopes {
        for (p, e) in power.iter_mut().zip(env) {
            *p += e * e;
        }
    }
    Ok(power
        .into_iter()
        .map(|p| (p / realizations.max(1) as f64).sqrt())
        .collect())
}
