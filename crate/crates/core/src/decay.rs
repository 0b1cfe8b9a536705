//! Decay-time estimation from energy decay functions, K-means clustering of
//! the estimates into common decay times, and evaluation of the decay kernels.
//!
//! Decay times are stored in kernel convention: `T` is the time at which the
//! kernel `exp(ln(1e-6) t / (fs T))` reaches 1e-6. Applied to an amplitude
//! envelope that is a 120 dB energy drop, so the conventional energy T60 is
//! `T / 2` (see [`kernel_to_t60`]). EDF fits work on energy and convert on
//! output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::optim::{gauss_newton, GaussNewtonOptions, LeastSquares, LinearConstraints};
use crate::signal::{envelope_time, floored_pow, Edf};
use crate::{Error, Result};

/// Level the kernel reaches at `t = fs * T`.
pub const KERNEL_LEVEL: f64 = 1e-6;

const MERGE_TOLERANCE: f64 = 0.02;

const CANDIDATE_COUNT: usize = 50;
const CANDIDATE_MIN_S: f64 = 0.05;
const CANDIDATE_MAX_S: f64 = 5.0;
const MAX_FIT_POINTS: usize = 500;
const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

/// `exp(ln(1e-6) t / (fs T))` with `t` in samples and `T` in seconds.
pub fn decay_kernel(t_samples: f64, decay_time: f64, sample_rate: f64) -> f64 {
    (KERNEL_LEVEL.ln() * t_samples / (sample_rate * decay_time)).exp()
}

/// Kernel-convention decay time to energy T60.
pub fn kernel_to_t60(decay_time: f64) -> f64 {
    decay_time / 2.0
}

/// Energy T60 to kernel convention.
pub fn t60_to_kernel(t60: f64) -> f64 {
    2.0 * t60
}

/// Kernel decay time whose kernel equals `exp(-delta t)` for an amplitude
/// decay rate `delta` in 1/s.
pub fn decay_rate_to_kernel(delta: f64) -> f64 {
    -KERNEL_LEVEL.ln() / delta
}

pub fn kernel_to_decay_rate(decay_time: f64) -> f64 {
    -KERNEL_LEVEL.ln() / decay_time
}

/// Decay times fitted to one RIR in one band.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayEstimate {
    /// Kernel-convention decay times in seconds, ascending.
    pub decay_times: Vec<f64>,
    /// EDF-domain amplitudes matching `decay_times`.
    pub amplitudes: Vec<f64>,
    /// Noise energy per sample (`N` of the `N (L - t)` EDF term).
    pub noise_level: f64,
    pub band_center: f64,
    pub position_id: String,
    /// Final objective on the square-root compressed, normalized EDF.
    pub residual: f64,
}

impl DecayEstimate {
    pub fn labelled(mut self, band_center: f64, position_id: impl Into<String>) -> Self {
        self.band_center = band_center;
        self.position_id = position_id.into();
        self
    }
}

fn candidate_t60s() -> Vec<f64> {
    let (lo, hi) = (CANDIDATE_MIN_S.ln(), CANDIDATE_MAX_S.ln());
    (0..CANDIDATE_COUNT)
        .map(|i| (lo + (hi - lo) * i as f64 / (CANDIDATE_COUNT - 1) as f64).exp())
        .collect()
}

/// EDF model of `kappa` exponentials plus a linear noise term, fitted on the
/// square-root compressed EDF. Parameters: `[ln T60_1.., a_1.., n]`.
struct EdfModel<'a> {
    times: &'a [f64],
    sqrt_target: Vec<f64>,
    len: f64,
    sample_rate: f64,
    kappa: usize,
}

impl EdfModel<'_> {
    fn noise_kernel(&self, t: f64) -> f64 {
        (self.len - t) / self.len
    }

    fn model(&self, x: &[f64], t: f64) -> f64 {
        let k = self.kappa;
        (0..k)
            .map(|i| x[k + i] * decay_kernel(t, x[i].exp(), self.sample_rate))
            .sum::<f64>()
            + x[2 * k] * self.noise_kernel(t)
    }
}

impl LeastSquares for EdfModel<'_> {
    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.times.len(),
            self.times
                .iter()
                .zip(&self.sqrt_target)
                .map(|(&t, &y)| y - floored_pow(self.model(x, t), 0.5)),
        )
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.kappa;
        let mut jac = DMatrix::zeros(self.times.len(), 2 * k + 1);
        let c = -KERNEL_LEVEL.ln();
        for (row, &t) in self.times.iter().enumerate() {
            let m = self.model(x, t);
            if m <= crate::signal::POWER_FLOOR {
                continue;
            }
            let d = -0.5 / m.sqrt();
            for i in 0..k {
                let tt = x[i].exp();
                let psi = decay_kernel(t, tt, self.sample_rate);
                jac[(row, i)] = d * x[k + i] * psi * c * t / (self.sample_rate * tt);
                jac[(row, k + i)] = d * psi;
            }
            jac[(row, 2 * k)] = d * self.noise_kernel(t);
        }
        jac
    }
}

/// Exact nonnegative least squares for a handful of variables by checking
/// every passive set. Returns `(x, weighted residual)`.
fn small_nnls(gram: &DMatrix<f64>, rhs: &DVector<f64>, yy: f64) -> (DVector<f64>, f64) {
    let n = rhs.len();
    let mut best = (DVector::zeros(n), yy);
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let g = DMatrix::from_fn(idx.len(), idx.len(), |i, j| gram[(idx[i], idx[j])]);
        let b = DVector::from_fn(idx.len(), |i, _| rhs[idx[i]]);
        let Some(sol) = g.cholesky().map(|c| c.solve(&b)) else {
            continue;
        };
        if sol.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut x = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            x[i] = sol[k];
        }
        let res = yy - 2.0 * x.dot(rhs) + (gram * &x).dot(&x);
        if res < best.1 {
            best = (x, res);
        }
    }
    best
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Fits `EDF(t) = N (L - t) + sum_k A_k exp(ln(1e-6) t / (fs T60_k))` with
/// nonnegative amplitudes on the square-root compressed EDF.
///
/// Candidate decay times come from a 50-point log grid between 0.05 s and
/// 5 s; the best grid combinations are refined with bounded Gauss-Newton.
/// The smallest order whose residual is within 5% of the best order's is
/// kept. Returned decay times are in kernel convention (`2 * T60`).
pub fn fit_edf_decays(edf: &Edf, sample_rate: u32, max_components: usize) -> Result<DecayEstimate> {
    if !(1..=3).contains(&max_components) {
        return Err(Error::InvalidParameter(format!(
            "max_components must be in 1..=3, got {max_components}"
        )));
    }
    if edf.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "EDF has {} points, need at least 10",
            edf.len()
        )));
    }
    if edf.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("EDF values must be finite and nonnegative".into()));
    }
    let scale = edf.values[0];
    let len = edf.len();
    if scale <= 0.0 {
        return Ok(DecayEstimate {
            decay_times: vec![],
            amplitudes: vec![],
            noise_level: 0.0,
            band_center: 0.0,
            position_id: String::new(),
            residual: 0.0,
        });
    }
    let fs = sample_rate as f64;

    let mut idx: Vec<usize> = if len <= MAX_FIT_POINTS {
        (0..len).collect()
    } else {
        (0..MAX_FIT_POINTS)
            .map(|i| ((i as f64) * (len - 1) as f64 / (MAX_FIT_POINTS - 1) as f64).round() as usize)
            .collect()
    };
    idx.dedup();
    let times: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    let y: Vec<f64> = idx.iter().map(|&i| edf.values[i] / scale).collect();

    let grid = candidate_t60s();
    let model0 = EdfModel {
        times: &times,
        sqrt_target: y.iter().map(|&v| floored_pow(v, 0.5)).collect(),
        len: len as f64,
        sample_rate: fs,
        kappa: 0,
    };

    // Linearized sqrt-domain weights: (sqrt y - sqrt m)^2 ~ (y - m)^2 / (4 y).
    let weights: Vec<f64> = y.iter().map(|&v| 0.25 / v.max(1e-12)).collect();
    let columns: Vec<Vec<f64>> = std::iter::once(times.iter().map(|&t| model0.noise_kernel(t)).collect())
        .chain(
            grid.iter()
                .map(|&t60| times.iter().map(|&t| decay_kernel(t, t60, fs)).collect()),
        )
        .collect();
    let ncol = columns.len();
    let gram = DMatrix::from_fn(ncol, ncol, |i, j| {
        (0..times.len())
            .map(|t| weights[t] * columns[i][t] * columns[j][t])
            .sum()
    });
    let rhs_all = DVector::from_fn(ncol, |i, _| {
        (0..times.len()).map(|t| weights[t] * columns[i][t] * y[t]).sum()
    });
    let yy: f64 = (0..times.len()).map(|t| weights[t] * y[t] * y[t]).sum();

    let options = GaussNewtonOptions::default();
    let ln_lo = (0.2 * CANDIDATE_MIN_S).ln();
    let ln_hi = (4.0 * CANDIDATE_MAX_S).ln();
    let mut per_order: Vec<(f64, Vec<f64>)> = Vec::with_capacity(max_components + 1);

    for kappa in 0..=max_components {
        let mut ranked: Vec<(f64, Vec<usize>, DVector<f64>)> = combinations(grid.len(), kappa)
            .into_iter()
            .map(|combo| {
                let sel: Vec<usize> = std::iter::once(0).chain(combo.iter().map(|c| c + 1)).collect();
                let g = DMatrix::from_fn(sel.len(), sel.len(), |i, j| gram[(sel[i], sel[j])]);
                let b = DVector::from_fn(sel.len(), |i, _| rhs_all[sel[i]]);
                let (x, res) = small_nnls(&g, &b, yy);
                (res, combo, x)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));

        let problem = EdfModel { kappa, ..EdfModel { sqrt_target: model0.sqrt_target.clone(), ..model0 } };
        let dim = 2 * kappa + 1;
        let mut cons = LinearConstraints::new();
        for i in 0..kappa {
            cons.push_lower_bound(dim, i, ln_lo);
            cons.push_upper_bound(dim, i, ln_hi);
            cons.push_lower_bound(dim, kappa + i, 0.0);
        }
        cons.push_lower_bound(dim, 2 * kappa, 0.0);

        let best = ranked
            .iter()
            .take(3)
            .map(|(_, combo, lin)| {
                let mut x0 = Vec::with_capacity(dim);
                x0.extend(combo.iter().map(|&c| grid[c].ln()));
                x0.extend((1..=kappa).map(|i| lin[i]));
                x0.push(lin[0]);
                let rep = gauss_newton(&problem, &cons, &x0, &options);
                (rep.objective, rep.x)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one candidate combination");
        per_order.push(best);
    }

    let best_obj = per_order.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let total: f64 = y.iter().sum();
    let tol = (1.05 * best_obj).max(best_obj + 1e-12 * total);
    let kappa = per_order
        .iter()
        .position(|p| p.0 <= tol)
        .expect("best order satisfies its own tolerance");
    let (residual, x) = &per_order[kappa];

    let mut comps: Vec<(f64, f64)> = (0..kappa)
        .map(|i| (t60_to_kernel(x[i].exp()), x[kappa + i] * scale))
        .filter(|&(_, a)| a > 0.0)
        .collect();
    comps.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Components within 2% of each other describe one decay; they are merged
    // at their amplitude-weighted time.
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(comps.len());
    for (t, a) in comps {
        match merged.last_mut() {
            Some(last) if (t - last.0).abs() <= MERGE_TOLERANCE * t => {
                last.0 = (last.0 * last.1 + t * a) / (last.1 + a);
                last.1 += a;
            }
            _ => merged.push((t, a)),
        }
    }
    Ok(DecayEstimate {
        decay_times: merged.iter().map(|c| c.0).collect(),
        amplitudes: merged.iter().map(|c| c.1).collect(),
        noise_level: x[2 * kappa] * scale / len as f64,
        band_center: 0.0,
        position_id: String::new(),
        residual: *residual,
    })
}

/// Result of one-dimensional K-means.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Ascending centroids.
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    // Strict comparison: ties go to the lower index.
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

fn lloyd(values: &[f64], mut centroids: Vec<f64>) -> KMeans {
    let k = centroids.len();
    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(values) {
            let n = nearest(&centroids, v);
            if *a != n {
                *a = n;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assign.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
    }
    let inertia = values
        .iter()
        .map(|&v| (v - centroids[nearest(&centroids, v)]).powi(2))
        .sum();
    centroids.sort_by(f64::total_cmp);
    KMeans { centroids, inertia }
}

/// K-means on scalars: k-means++ seeding, 20 restarts, lowest inertia kept.
/// Input order does not matter; results are fixed by `seed`.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct values for K = {k}",
            distinct.len()
        )));
    }
    let mut rng = crate::rng::rng(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut centroids = vec![sorted[rng.random_range(0..sorted.len())]];
        while centroids.len() < k {
            let d2: Vec<f64> = sorted
                .iter()
                .map(|&v| (v - centroids[nearest(&centroids, v)]).powi(2))
                .collect();
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = d2.len() - 1;
                for (i, d) in d2.iter().enumerate() {
                    if target < *d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            } else {
                rng.random_range(0..sorted.len())
            };
            centroids.push(sorted[pick]);
        }
        let run = lloyd(&sorted, centroids);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Common decay times of one band.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonTimes {
    pub band_center: f64,
    /// Ascending kernel-convention decay times in seconds.
    pub times: Vec<f64>,
}

/// Pools the decay times of all estimates per band and clusters them into
/// `k` common decay times. Bands come back in ascending center order.
pub fn cluster_decay_times(estimates: &[DecayEstimate], k: usize, seed: u64) -> Result<Vec<CommonTimes>> {
    cluster_decay_times_per_band(estimates, |_| k, seed)
}

/// Like [`cluster_decay_times`] with a band-dependent `k`.
pub fn cluster_decay_times_per_band(
    estimates: &[DecayEstimate],
    k_for_band: impl Fn(f64) -> usize,
    seed: u64,
) -> Result<Vec<CommonTimes>> {
    let mut centers: Vec<f64> = estimates.iter().map(|e| e.band_center).collect();
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    centers
        .into_iter()
        .map(|band_center| {
            let values: Vec<f64> = estimates
                .iter()
                .filter(|e| e.band_center == band_center)
                .flat_map(|e| e.decay_times.iter().copied())
                .collect();
            let k = k_for_band(band_center);
            let km = kmeans_1d(&values, k, seed).map_err(|e| match e {
                Error::InsufficientData(msg) => {
                    Error::InsufficientData(format!("band {band_center} Hz: {msg}"))
                }
                other => other,
            })?;
            Ok(CommonTimes { band_center, times: km.centroids })
        })
        .collect()
}

/// Kernels of one band evaluated on the envelope grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BandKernels {
    pub center_hz: f64,
    pub decay_times: Vec<f64>,
    /// `columns[0]` is the constant noise kernel, `columns[k]` the kernel of
    /// `decay_times[k - 1]`.
    pub columns: Vec<Vec<f64>>,
}

impl BandKernels {
    pub fn num_decays(&self) -> usize {
        self.decay_times.len()
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayKernelSet {
    pub bands: Vec<BandKernels>,
    pub envelope_len: usize,
    pub window_len: usize,
    pub sample_rate: u32,
}

impl DecayKernelSet {
    pub fn band(&self, center_hz: f64) -> Option<&BandKernels> {
        self.bands.iter().find(|b| b.center_hz == center_hz)
    }
}

/// Evaluates the noise kernel and one decay kernel per common time at the
/// envelope window centers `(m + 0.5) * window_len`.
pub fn build_kernels(
    common_times: &[CommonTimes],
    envelope_len: usize,
    window_len: usize,
    sample_rate: u32,
) -> Result<DecayKernelSet> {
    if window_len == 0 || sample_rate == 0 {
        return Err(Error::InvalidParameter("window length and sample rate must be positive".into()));
    }
    let fs = sample_rate as f64;
    let bands = common_times
        .iter()
        .map(|ct| {
            if let Some(t) = ct.times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
                return Err(Error::InvalidParameter(format!(
                    "decay time {t} s in band {} Hz must be positive",
                    ct.band_center
                )));
            }
            let mut times = ct.times.clone();
            times.sort_by(f64::total_cmp);
            let grid: Vec<f64> = (0..envelope_len).map(|m| envelope_time(m, window_len)).collect();
            let columns = std::iter::once(vec![1.0; envelope_len])
                .chain(times.iter().map(|&tt| grid.iter().map(|&t| decay_kernel(t, tt, fs)).collect()))
                .collect();
            Ok(BandKernels {
                center_hz: ct.band_center,
                decay_times: times,
                columns,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecayKernelSet {
        bands,
        envelope_len,
        window_len,
        sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edf_from_model(t60s: &[f64], amps: &[f64], noise: f64, len: usize, fs: f64) -> Edf {
        let values = (0..len)
            .map(|t| {
                let t = t as f64;
                noise * (len as f64 - t)
                    + t60s
                        .iter()
                        .zip(amps)
                        .map(|(&tt, &a)| a * decay_kernel(t, tt, fs))
                        .sum::<f64>()
            })
            .collect();
        Edf { values, normalized: false }
    }

    #[test]
    fn kernel_definition() {
        assert_eq!(decay_kernel(0.0, 0.7, 48_000.0), 1.0);
        let v = decay_kernel(12_000.0, 0.5, 48_000.0);
        assert!((v - 1e-3).abs() < 1e-15, "{v}");
        let at_t = decay_kernel(48_000.0 * 1.3, 1.3, 48_000.0);
        assert!((at_t / 1e-6 - 1.0).abs() < 1e-12);
        assert!((decay_kernel(480.0, decay_rate_to_kernel(20.0), 48_000.0) - (-0.2f64).exp()).abs() < 1e-15);
        assert_eq!(kernel_to_t60(t60_to_kernel(0.4)), 0.4);
    }

    #[test]
    fn single_slope_edf_is_recovered() {
        let edf = edf_from_model(&[0.5], &[1.0], 0.0, 48_000, 48_000.0);
        let est = fit_edf_decays(&edf, 48_000, 3).unwrap();
        assert_eq!(est.decay_times.len(), 1, "{est:?}");
        assert!((kernel_to_t60(est.decay_times[0]) / 0.5 - 1.0).abs() < 0.01);
        assert!(est.residual < 1e-8, "{}", est.residual);
    }

    #[test]
    fn two_slope_edf_is_recovered() {
        let edf = edf_from_model(&[0.3, 1.2], &[10.0, 1.0], 0.0, 48_000, 48_000.0);
        let est = fit_edf_decays(&edf, 48_000, 3).unwrap();
        assert_eq!(est.decay_times.len(), 2, "{est:?}");
        let t60: Vec<f64> = est.decay_times.iter().map(|&t| kernel_to_t60(t)).collect();
        assert!((t60[0] / 0.3 - 1.0).abs() < 0.05, "{t60:?}");
        assert!((t60[1] / 1.2 - 1.0).abs() < 0.05, "{t60:?}");
        assert!((est.amplitudes[0] / est.amplitudes[1] / 10.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn two_slope_grid_oracle_agrees() {
        // Brute force over the candidate grid (linear NNLS per pair on the
        // unweighted EDF) lands on the grid neighbours of the true values.
        let fs = 48_000.0;
        let edf = edf_from_model(&[0.3, 1.2], &[10.0, 1.0], 0.0, 2_000, fs / 24.0);
        let grid = candidate_t60s();
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let cols: Vec<Vec<f64>> = [grid[i], grid[j]]
                    .iter()
                    .map(|&tt| (0..edf.len()).map(|t| decay_kernel(t as f64, tt, fs / 24.0)).collect())
                    .collect();
                let g = DMatrix::from_fn(2, 2, |a, b| cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum());
                let r = DVector::from_fn(2, |a, _| cols[a].iter().zip(&edf.values).map(|(x, y)| x * y).sum());
                let yy: f64 = edf.values.iter().map(|v| v * v).sum();
                let (_, res) = small_nnls(&g, &r, yy);
                if res < best.0 {
                    best = (res, i, j);
                }
            }
        }
        assert!((grid[best.1] / 0.3 - 1.0).abs() < 0.1);
        assert!((grid[best.2] / 1.2 - 1.0).abs() < 0.1);
        let est = fit_edf_decays(&edf, 2_000, 3).unwrap();
        assert!((kernel_to_t60(est.decay_times[0]) / 0.3 - 1.0).abs() < 0.05);
        assert!((kernel_to_t60(est.decay_times[1]) / 1.2 - 1.0).abs() < 0.05);
    }

    #[test]
    fn noise_only_edf_has_no_decays() {
        let edf = edf_from_model(&[], &[], 2.5e-3, 4_000, 48_000.0);
        let est = fit_edf_decays(&edf, 48_000, 3).unwrap();
        assert!(est.decay_times.is_empty(), "{est:?}");
        assert!((est.noise_level / 2.5e-3 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edf_fit_errors() {
        let short = Edf { values: vec![1.0; 9], normalized: true };
        assert!(matches!(fit_edf_decays(&short, 48_000, 1), Err(Error::InsufficientData(_))));
        let ok = Edf { values: vec![1.0; 20], normalized: true };
        assert!(fit_edf_decays(&ok, 48_000, 0).is_err());
        assert!(fit_edf_decays(&ok, 48_000, 4).is_err());
    }

    #[test]
    fn kmeans_symmetric_groups() {
        let v = [0.19, 0.20, 0.21, 0.98, 1.00, 1.02];
        let km = kmeans_1d(&v, 2, 1).unwrap();
        assert!((km.centroids[0] - 0.20).abs() < 1e-12);
        assert!((km.centroids[1] - 1.00).abs() < 1e-12);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let v = [0.3, 0.5, 1.9, 0.2];
        let km = kmeans_1d(&v, 1, 9).unwrap();
        assert!((km.centroids[0] - 0.725).abs() < 1e-12);
    }

    #[test]
    fn kmeans_insufficient_values() {
        assert!(matches!(kmeans_1d(&[0.1, 0.1, 0.2], 3, 0), Err(Error::InsufficientData(_))));
        assert!(kmeans_1d(&[0.1], 0, 0).is_err());
    }

    /// Globally optimal 1-D three-cluster partition: clusters are contiguous
    /// in sorted order, so trying every pair of split points is exhaustive.
    fn brute_force_3(sorted: &[f64]) -> (f64, [f64; 3]) {
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let sse = |s: &[f64]| {
            let m = mean(s);
            s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        let n = sorted.len();
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 1..n - 1 {
            for j in i + 1..n {
                let parts = [&sorted[..i], &sorted[i..j], &sorted[j..]];
                let cost: f64 = parts.iter().map(|p| sse(p)).sum();
                if cost < best.0 {
                    best = (cost, parts.map(mean));
                }
            }
        }
        best
    }

    #[test]
    fn kmeans_planted_clusters_match_exhaustive_optimum() {
        use rand_distr::{Distribution, Normal};
        let planted = [0.4, 1.1, 2.3];
        let mut rng = crate::rng::rng(42);
        let mut values = Vec::new();
        for &c in &planted {
            let d = Normal::new(c, 0.01).unwrap();
            values.extend((0..20).map(|_| d.sample(&mut rng)));
        }
        let km = kmeans_1d(&values, 3, 7).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let (cost, centers) = brute_force_3(&sorted);
        assert!((km.inertia - cost).abs() < 1e-12);
        for i in 0..3 {
            assert!((km.centroids[i] - centers[i]).abs() < 1e-12);
            assert!((km.centroids[i] - planted[i]).abs() < 0.02);
        }
    }

    #[test]
    fn clustering_groups_by_band() {
        let est = |band: f64, times: Vec<f64>| DecayEstimate {
            amplitudes: vec![1.0; times.len()],
            decay_times: times,
            noise_level: 0.0,
            band_center: band,
            position_id: "x".into(),
            residual: 0.0,
        };
        let estimates = vec![
            est(1000.0, vec![0.5, 2.0]),
            est(500.0, vec![0.7]),
            est(1000.0, vec![0.52, 2.1]),
            est(500.0, vec![0.9]),
        ];
        let ct = cluster_decay_times(&estimates, 2, 3).unwrap();
        assert_eq!(ct.len(), 2);
        assert_eq!(ct[0].band_center, 500.0);
        assert_eq!(ct[0].times, vec![0.7, 0.9]);
        assert!((ct[1].times[0] - 0.51).abs() < 1e-12);
        assert!((ct[1].times[1] - 2.05).abs() < 1e-12);
        assert!(cluster_decay_times(&estimates, 3, 3).is_err());
    }

    #[test]
    fn kernels_on_envelope_grid() {
        let fs = 48_000;
        let ct = [CommonTimes { band_center: 1000.0, times: vec![1.0, 0.25] }];
        // Envelope end: (200 - 0.5) * 240 samples.
        let end_time = 199.5 * 240.0 / fs as f64;
        let ks = build_kernels(&[CommonTimes { band_center: 1.0, times: vec![end_time] }], 200, 240, fs).unwrap();
        assert!((ks.bands[0].columns[1][199] / 1e-6 - 1.0).abs() < 1e-12);

        let ks = build_kernels(&ct, 200, 240, fs).unwrap();
        let b = &ks.bands[0];
        assert_eq!(b.decay_times, vec![0.25, 1.0]);
        assert!(b.columns[0].iter().all(|&v| v == 1.0));
        for col in &b.columns[1..] {
            assert!(col.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(build_kernels(&[CommonTimes { band_center: 1.0, times: vec![0.0] }], 10, 10, fs).is_err());
        assert!(build_kernels(&[CommonTimes { band_center: 1.0, times: vec![-1.0] }], 10, 10, fs).is_err());
    }

    proptest! {
        #[test]
        fn kmeans_is_permutation_invariant(
            mut values in prop::collection::vec(0.05f64..5.0, 6..40),
            seed in 0u64..100,
            k in 1usize..4,
        ) {
            let a = kmeans_1d(&values, k, seed);
            values.reverse();
            let b = kmeans_1d(&values, k, seed);
            prop_assert_eq!(a.ok(), b.ok());
        }

        #[test]
        fn longer_decays_dominate(ta in 0.05f64..5.0, tb in 0.05f64..5.0, t in 0.0f64..1e6) {
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            prop_assert!(decay_kernel(t, lo, 48_000.0) <= decay_kernel(t, hi, 48_000.0));
        }

        #[test]
        fn kernel_hits_level_at_its_time(tt in 0.01f64..10.0) {
            let v = decay_kernel(48_000.0 * tt, tt, 48_000.0);
            prop_assert!((v / KERNEL_LEVEL - 1.0).abs() < 1e-12);
        }
    }
}
