//! Band splitting, short-term RMS envelopes, energy decay functions and the
//! power-law scaling used as the fitting domain.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;

use crate::{Error, Result};

/// Seven octave bands, 125 Hz to 8 kHz.
pub const DEFAULT_BAND_CENTERS: [f64; 7] = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0];

/// Floor applied before power-law scaling so the square root keeps a finite slope.
pub const POWER_FLOOR: f64 = 1e-12;

/// Default number of envelope points a RIR is reduced to.
pub const DEFAULT_ENVELOPE_POINTS: usize = 200;

/// A sampled room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Label of the source-receiver configuration.
    pub position_id: String,
    /// Octave band center in Hz, `None` for broadband.
    pub band: Option<f64>,
}

impl Rir {
    pub fn new(samples: Vec<f64>, sample_rate: u32, position_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            position_id: position_id.into(),
            band: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    fn with_samples(&self, samples: Vec<f64>, band: Option<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            position_id: self.position_id.clone(),
            band,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + s1;
                s1 = self.b[1] * v - self.a[0] * y + s2;
                s2 = self.b[2] * v - self.a[1] * y;
                y
            })
            .collect()
    }

    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// Octave band-pass filter: a 4th-order Butterworth band-pass (two biquads)
/// with edges at `center / sqrt(2)` and `center * sqrt(2)`, unit gain at the
/// center. Applied forward and backward for zero phase.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFilter {
    pub center_hz: f64,
    pub sample_rate: u32,
    sections: [Biquad; 2],
}

impl BandFilter {
    pub fn design(center_hz: f64, sample_rate: u32) -> Result<Self> {
        let fs = sample_rate as f64;
        let (lo, hi) = (center_hz / SQRT_2, center_hz * SQRT_2);
        if center_hz <= 0.0 || !center_hz.is_finite() {
            return Err(Error::InvalidBand(format!("band center {center_hz} Hz")));
        }
        if hi >= fs / 2.0 {
            return Err(Error::InvalidBand(format!(
                "upper edge {hi:.1} Hz of the {center_hz} Hz band is at or above Nyquist ({} Hz)",
                fs / 2.0
            )));
        }

        // Prewarped analog edges, then lowpass -> bandpass on the 2nd-order
        // Butterworth prototype and the bilinear transform.
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (w_lo, w_hi) = (warp(lo), warp(hi));
        let w0_sq = w_lo * w_hi;
        let bw = w_hi - w_lo;
        let proto = Complex64::from_polar(1.0, 0.75 * PI);
        let pb = proto * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        let analog = [(pb + disc) / 2.0, (pb - disc) / 2.0];

        let two_fs = 2.0 * fs;
        let mut sections = analog.map(|s| {
            let z = (two_fs + s) / (two_fs - s);
            Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * z.re, z.norm_sqr()],
            }
        });

        let omega_c = 2.0 * PI * center_hz / fs;
        let gain = sections
            .iter()
            .map(|s| s.response(omega_c).norm())
            .product::<f64>();
        let g = gain.sqrt().recip();
        for s in &mut sections {
            for b in &mut s.b {
                *b *= g;
            }
        }
        Ok(Self {
            center_hz,
            sample_rate,
            sections,
        })
    }

    /// Complex response of a single (causal) pass at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate as f64;
        self.sections.iter().map(|s| s.response(omega)).product()
    }

    /// Magnitude of the zero-phase (forward-backward) response: `|H|^2`.
    pub fn zero_phase_gain(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm_sqr()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.sections
            .iter()
            .fold(x.to_vec(), |acc, s| s.process(&acc))
    }

    /// Forward-backward filtering; the output has the input's length and no
    /// group delay.
    pub fn filter_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.forward(x);
        y.reverse();
        let mut y = self.forward(&y);
        y.reverse();
        y
    }
}

/// Splits `rir` into octave bands, one zero-phase filtered copy per center.
pub fn octave_filterbank(rir: &Rir, band_centers: &[f64]) -> Result<Vec<Rir>> {
    if band_centers.is_empty() {
        return Err(Error::InvalidBand("no band centers given".into()));
    }
    if band_centers.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidBand(
            "band centers must be strictly increasing".into(),
        ));
    }
    band_centers
        .iter()
        .map(|&fc| {
            let filter = BandFilter::design(fc, rir.sample_rate)?;
            Ok(rir.with_samples(filter.filter_zero_phase(&rir.samples), Some(fc)))
        })
        .collect()
}

/// Window length giving roughly [`DEFAULT_ENVELOPE_POINTS`] envelope points.
pub fn default_window_len(len: usize) -> usize {
    ((len as f64 / DEFAULT_ENVELOPE_POINTS as f64).round() as usize).max(1)
}

/// Symmetric `[0.25, 0.5, 0.25]` smoother with replicated edges.
pub(crate) fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let prev = x[i.saturating_sub(1)];
            let next = x[(i + 1).min(n - 1)];
            0.25 * (prev + next) + 0.5 * x[i]
        })
        .collect()
}

/// Short-term RMS envelope over non-overlapping windows of `window_len`
/// samples, followed by a 3-point low-pass. Output length is
/// `floor(len / window_len)`; a trailing partial window is dropped.
pub fn rms_envelope(rir: &Rir, window_len: usize) -> Result<Vec<f64>> {
    if rir.is_empty() {
        return Err(Error::DegenerateInput("empty RIR".into()));
    }
    if window_len == 0 || window_len > rir.len() {
        return Err(Error::InvalidWindow(format!(
            "window length {window_len} for a RIR of {} samples",
            rir.len()
        )));
    }
    let raw: Vec<f64> = rir
        .samples
        .chunks_exact(window_len)
        .map(|w| (w.iter().map(|x| x * x).sum::<f64>() / window_len as f64).sqrt())
        .collect();
    Ok(smooth3(&raw))
}

/// Per-band RMS envelopes of a RIR on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedEnvelope {
    /// `values[b][m]`: envelope of band `b` at window `m`.
    pub values: Vec<Vec<f64>>,
    pub band_centers: Vec<f64>,
    pub window_len: usize,
    pub sample_rate: u32,
    /// Samples between envelope points; equal to `window_len`.
    pub hop: usize,
    pub position_id: String,
}

impl BandedEnvelope {
    /// Envelopes of already band-filtered RIRs (e.g. the output of
    /// [`octave_filterbank`]).
    pub fn from_bands(bands: &[Rir], window_len: usize) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| Error::Shape("no bands given".into()))?;
        if bands
            .iter()
            .any(|b| b.len() != first.len() || b.sample_rate != first.sample_rate)
        {
            return Err(Error::Shape("bands differ in length or sample rate".into()));
        }
        let values = bands
            .iter()
            .map(|b| rms_envelope(b, window_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values,
            band_centers: bands.iter().map(|b| b.band.unwrap_or(0.0)).collect(),
            window_len,
            sample_rate: first.sample_rate,
            hop: window_len,
            position_id: first.position_id.clone(),
        })
    }

    /// Filterbank followed by per-band envelopes.
    pub fn analyze(rir: &Rir, band_centers: &[f64], window_len: usize) -> Result<Self> {
        Self::from_bands(&octave_filterbank(rir, band_centers)?, window_len)
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_bands(&self) -> usize {
        self.values.len()
    }
}

/// Sample instant (in samples) of envelope point `m`: the window center.
pub fn envelope_time(m: usize, window_len: usize) -> f64 {
    (m as f64 + 0.5) * window_len as f64
}

/// Energy decay function (backward-integrated squared RIR).
#[derive(Debug, Clone, PartialEq)]
pub struct Edf {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Edf {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Schroeder backward integration. With `normalize` the curve is divided by
/// its first value so it starts at exactly 1.
pub fn schroeder_edf(rir: &Rir, normalize: bool) -> Result<Edf> {
    if rir.is_empty() {
        return Err(Error::DegenerateInput("empty RIR".into()));
    }
    let mut values = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for (v, x) in values.iter_mut().zip(&rir.samples).rev() {
        acc += x * x;
        *v = acc;
    }
    if normalize {
        let total = values[0];
        if total <= 0.0 {
            return Err(Error::DegenerateInput(
                "cannot normalize the EDF of an all-zero RIR".into(),
            ));
        }
        for v in &mut values {
            *v /= total;
        }
    }
    Ok(Edf { values, normalized: normalize })
}

/// `max(x, POWER_FLOOR)^factor` without input checks, for use inside solvers.
#[inline]
pub(crate) fn floored_pow(x: f64, factor: f64) -> f64 {
    x.max(POWER_FLOOR).powf(factor)
}

/// Power-law compression `max(v, 1e-12)^factor`, elementwise.
pub fn power_scale(values: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Domain(format!("power factor {factor} outside (0, 1]")));
    }
    values
        .iter()
        .map(|&v| {
            if v < 0.0 || v.is_nan() {
                Err(Error::Domain(format!("negative value {v} cannot be power-scaled")))
            } else {
                Ok(floored_pow(v, factor))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rir(samples: Vec<f64>) -> Rir {
        Rir::new(samples, 48_000, "p").unwrap()
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(Rir::new(vec![0.0, f64::NAN], 48_000, "x").is_err());
        assert!(Rir::new(vec![0.0], 0, "x").is_err());
    }

    #[test]
    fn default_centers_are_the_seven_octaves() {
        assert_eq!(
            DEFAULT_BAND_CENTERS,
            [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0]
        );
    }

    #[test]
    fn band_filter_has_unit_center_gain_and_half_power_edges() {
        for &fc in &DEFAULT_BAND_CENTERS {
            let f = BandFilter::design(fc, 48_000).unwrap();
            assert!((f.response(fc).norm() - 1.0).abs() < 1e-9, "{fc}");
            // Butterworth: -3 dB per pass at the band edges.
            let lo = f.response(fc / SQRT_2).norm_sqr();
            let hi = f.response(fc * SQRT_2).norm_sqr();
            // The gain is pinned at the center rather than the warped peak,
            // which shifts the edges slightly near Nyquist.
            assert!((lo - 0.5).abs() < 1e-4, "{fc} lo {lo}");
            assert!((hi - 0.5).abs() < 1e-4, "{fc} hi {hi}");
        }
    }

    #[test]
    fn band_above_nyquist_is_rejected() {
        let x = rir(vec![0.0; 100]);
        let narrow = Rir::new(vec![0.0; 100], 20_000, "p").unwrap();
        let err = octave_filterbank(&narrow, &[1000.0, 8000.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidBand(_)));
        // 16 kHz has Nyquist 8 kHz, the 4 kHz band upper edge is 5657 Hz.
        let low_rate = Rir::new(vec![0.0; 100], 16_000, "p").unwrap();
        assert!(octave_filterbank(&low_rate, &[4000.0]).is_ok());
        assert!(octave_filterbank(&low_rate, &[8000.0]).is_err());
        assert!(octave_filterbank(&x, &[500.0, 250.0]).is_err());
    }

    #[test]
    fn tone_energy_lands_in_its_band() {
        // Oracle: designed zero-phase magnitudes evaluated at 1 kHz.
        let filters: Vec<_> = DEFAULT_BAND_CENTERS
            .iter()
            .map(|&fc| BandFilter::design(fc, 48_000).unwrap())
            .collect();
        let gains: Vec<f64> = filters.iter().map(|f| f.zero_phase_gain(1000.0).powi(2)).collect();
        let predicted = gains[3] / gains.iter().sum::<f64>();
        assert!(predicted >= 0.9, "predicted share {predicted}");

        let tone: Vec<f64> = (0..48_000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 48_000.0).sin())
            .collect();
        let bands = octave_filterbank(&rir(tone), &DEFAULT_BAND_CENTERS).unwrap();
        // Steady-state region only; the edges carry filter transients.
        let energy: Vec<f64> = bands
            .iter()
            .map(|b| b.samples[12_000..36_000].iter().map(|x| x * x).sum())
            .collect();
        let share = energy[3] / energy.iter().sum::<f64>();
        assert!(share >= 0.9, "measured share {share}");
        assert!((share - predicted).abs() < 0.01);
        assert!(bands.iter().all(|b| b.len() == 48_000));
        assert_eq!(bands[3].band, Some(1000.0));
    }

    #[test]
    fn zero_in_zero_out() {
        let bands = octave_filterbank(&rir(vec![0.0; 4800]), &DEFAULT_BAND_CENTERS).unwrap();
        assert!(bands.iter().all(|b| b.samples.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn filtering_is_zero_phase() {
        // A symmetric input stays symmetric under forward-backward filtering.
        let n = 4001;
        let mut x = vec![0.0; n];
        x[n / 2] = 1.0;
        let f = BandFilter::design(1000.0, 48_000).unwrap();
        let y = f.filter_zero_phase(&x);
        let peak = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, n / 2);
        for k in 1..200 {
            assert!((y[n / 2 - k] - y[n / 2 + k]).abs() < 1e-6);
        }
    }

    #[test]
    fn envelope_of_constant_is_constant() {
        for w in [1, 7, 240] {
            let env = rms_envelope(&rir(vec![-0.3; 2400]), w).unwrap();
            assert_eq!(env.len(), 2400 / w);
            assert!(env.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn envelope_length_for_one_second_at_48k() {
        assert_eq!(default_window_len(48_000), 240);
        let env = rms_envelope(&rir(vec![1.0; 48_000]), 240).unwrap();
        assert_eq!(env.len(), 200);
    }

    #[test]
    fn envelope_window_errors() {
        assert!(matches!(
            rms_envelope(&rir(vec![1.0; 10]), 11),
            Err(Error::InvalidWindow(_))
        ));
        assert!(matches!(
            rms_envelope(&rir(vec![1.0; 10]), 0),
            Err(Error::InvalidWindow(_))
        ));
        assert!(rms_envelope(&rir(vec![]), 1).is_err());
    }

    #[test]
    fn ensemble_envelope_tracks_exponential() {
        // Monte-Carlo oracle: the mean envelope of exp(-delta t) n(t) over many
        // realizations approaches exp(-delta t).
        let (fs, len, w, delta) = (48_000usize, 24_000usize, 240usize, 8.0);
        let m = 1000;
        let mut acc = vec![0.0; len / w];
        for r in 0..m {
            let n = crate::rng::gaussian_noise(len, 1000 + r);
            let h: Vec<f64> = n
                .iter()
                .enumerate()
                .map(|(i, x)| (-delta * i as f64 / fs as f64).exp() * x)
                .collect();
            let env = rms_envelope(&rir(h), w).unwrap();
            for (a, e) in acc.iter_mut().zip(env) {
                *a += e / m as f64;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let expected = (-delta * envelope_time(i, w) / fs as f64).exp();
            if expected < 1e-3 {
                break;
            }
            assert!((a / expected - 1.0).abs() < 0.05, "point {i}: {a} vs {expected}");
        }
    }

    #[test]
    fn edf_of_unit_impulse() {
        let mut x = vec![0.0; 16];
        x[0] = 1.0;
        let edf = schroeder_edf(&rir(x), true).unwrap();
        assert_eq!(edf.values[0], 1.0);
        assert!(edf.values[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edf_of_exponential_is_log_linear() {
        // h^2 = exp(-t / tau): the backward sum is a geometric series with
        // ratio exp(-1/tau), so log10 EDF drops by 1/(tau ln 10) per sample
        // until the truncation term matters.
        let tau = 500.0;
        let n = 20_000;
        let h: Vec<f64> = (0..n).map(|t| (-(t as f64) / tau / 2.0).exp()).collect();
        let edf = schroeder_edf(&rir(h), true).unwrap();
        let slope = -1.0 / (tau * std::f64::consts::LN_10);
        for t in (0..5000).step_by(97) {
            let d = edf.values[t + 1].log10() - edf.values[t].log10();
            assert!((d - slope).abs() < 1e-6, "t={t}: {d} vs {slope}");
        }
    }

    #[test]
    fn edf_of_zero_tail_is_zero() {
        let mut x = crate::rng::gaussian_noise(100, 5);
        x.extend(std::iter::repeat_n(0.0, 50));
        let edf = schroeder_edf(&rir(x), false).unwrap();
        assert!(edf.values[100..].iter().all(|&v| v == 0.0));
        assert!(edf.values[99] > 0.0);
    }

    #[test]
    fn edf_normalize_zero_rir_fails() {
        assert!(matches!(
            schroeder_edf(&rir(vec![0.0; 8]), true),
            Err(Error::DegenerateInput(_))
        ));
        assert!(schroeder_edf(&rir(vec![0.0; 8]), false).is_ok());
    }

    #[test]
    fn power_scale_examples() {
        assert_eq!(power_scale(&[4.0], 0.5).unwrap(), vec![2.0]);
        assert_eq!(power_scale(&[0.0], 0.5).unwrap(), vec![POWER_FLOOR.sqrt()]);
        let x = [1e-6, 0.3, 7.0];
        assert_eq!(power_scale(&x, 1.0).unwrap(), x.to_vec());
        assert!(matches!(power_scale(&[-1.0], 0.5), Err(Error::Domain(_))));
        assert!(power_scale(&[1.0], 0.0).is_err());
        assert!(power_scale(&[1.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn filterbank_is_linear(
            x in prop::collection::vec(-1.0f64..1.0, 64..256),
            y_seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let y = crate::rng::gaussian_noise(x.len(), y_seed);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let centers = [500.0, 2000.0];
            let fx = octave_filterbank(&rir(x), &centers).unwrap();
            let fy = octave_filterbank(&rir(y), &centers).unwrap();
            let fm = octave_filterbank(&rir(mix), &centers).unwrap();
            for band in 0..centers.len() {
                let scale = fm[band].samples.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
                for i in 0..fm[band].len() {
                    let lin = a * fx[band].samples[i] + b * fy[band].samples[i];
                    prop_assert!((fm[band].samples[i] - lin).abs() <= 1e-9 * scale.max(1.0));
                }
            }
        }

        #[test]
        fn envelope_ignores_sign(x in prop::collection::vec(-5.0f64..5.0, 10..200), w in 1usize..10) {
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert_eq!(rms_envelope(&rir(x), w).unwrap(), rms_envelope(&rir(neg), w).unwrap());
        }

        #[test]
        fn edf_is_non_increasing(x in prop::collection::vec(-5.0f64..5.0, 1..300)) {
            let any = x.iter().any(|&v| v != 0.0);
            let edf = schroeder_edf(&rir(x.clone()), false).unwrap();
            prop_assert!(edf.values.windows(2).all(|w| w[1] <= w[0]));
            if any {
                let edf = schroeder_edf(&rir(x), true).unwrap();
                prop_assert_eq!(edf.values[0], 1.0);
                prop_assert!(edf.values.windows(2).all(|w| w[1] <= w[0]));
            }
        }

        #[test]
        fn power_scale_is_monotone(mut x in prop::collection::vec(0.0f64..100.0, 1..50), f in 0.05f64..=1.0) {
            let scaled = power_scale(&x, f).unwrap();
            x.sort_by(f64::total_cmp);
            let mut sorted_scaled = scaled.clone();
            sorted_scaled.sort_by(f64::total_cmp);
            prop_assert_eq!(power_scale(&x, f).unwrap(), sorted_scaled);
        }
    }
}
