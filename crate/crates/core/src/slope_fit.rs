//! Amplitude fitting of the common decay kernels to band envelopes.
//!
//! For each band the envelope is modelled as
//! `s(t) = N + sum_k A_k psi_k(t)` and fitted by minimizing
//! `sum_t [sqrt(target(t)) - sqrt(s(t))]^2` over `t >= skip_head`.
//!
//! * [`Mode::FadeIn`]: amplitudes are signed; the noise-free part
//!   `sum_k A_k psi_k(t)` must stay nonnegative at every envelope point.
//! * [`Mode::PosOnly`]: every amplitude is nonnegative.
//!
//! `N >= 0` in both modes. The constraints are linear in the parameters, so
//! the fit is a damped Gauss-Newton iteration whose steps are constrained
//! QPs (see [`crate::optim`]). Every point feasible for `PosOnly` is feasible
//! for `FadeIn`, and the `FadeIn` fit is also started from the `PosOnly`
//! optimum, so its objective never exceeds the `PosOnly` one.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay::{BandKernels, DecayKernelSet};
use crate::optim::{gauss_newton, solve_qp, GaussNewtonOptions, LeastSquares, LinearConstraints};
use crate::signal::{floored_pow, BandedEnvelope, POWER_FLOOR};
use crate::{Error, Result};

/// Skip applied to the fitting objective and the RMSE, in milliseconds.
pub const DEFAULT_SKIP_MS: f64 = 8.0;

const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fadein")]
    FadeIn,
    #[serde(rename = "posonly")]
    PosOnly,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FadeIn => "fadein",
            Mode::PosOnly => "posonly",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fadein" => Ok(Mode::FadeIn),
            "posonly" => Ok(Mode::PosOnly),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode `{other}` (expected fadein or posonly)"
            ))),
        }
    }
}

/// Fit of one band of one envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFit {
    pub center_hz: f64,
    /// One signed amplitude per common decay time, same order as the kernels.
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub mode: Mode,
    /// Final value of the compressed-domain objective, in target units.
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
}

impl BandFit {
    fn zero(center_hz: f64, k: usize, mode: Mode) -> Self {
        Self {
            center_hz,
            amplitudes: vec![0.0; k],
            noise: 0.0,
            mode,
            objective_value: 0.0,
            iterations: 0,
            converged: true,
            feasible: true,
        }
    }

    /// Modelled envelope on the kernel grid, without clamping.
    pub fn evaluate(&self, kernels: &BandKernels) -> Result<Vec<f64>> {
        if kernels.num_decays() != self.amplitudes.len() {
            return Err(Error::Shape(format!(
                "{} amplitudes for {} kernels in band {} Hz",
                self.amplitudes.len(),
                kernels.num_decays(),
                kernels.center_hz
            )));
        }
        Ok((0..kernels.len())
            .map(|m| {
                self.noise
                    + self
                        .amplitudes
                        .iter()
                        .zip(&kernels.columns[1..])
                        .map(|(a, col)| a * col[m])
                        .sum::<f64>()
            })
            .collect())
    }

    /// Smallest value of the noise-free model `sum_k A_k psi_k` on the grid.
    pub fn min_decay_part(&self, kernels: &BandKernels) -> f64 {
        (0..kernels.len())
            .map(|m| {
                self.amplitudes
                    .iter()
                    .zip(&kernels.columns[1..])
                    .map(|(a, col)| a * col[m])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// All band fits of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub position_id: String,
    pub mode: Mode,
    pub bands: Vec<BandFit>,
}

/// Number of envelope points covering the first `skip_ms` milliseconds.
pub fn skip_head_points(skip_ms: f64, window_len: usize, sample_rate: u32) -> usize {
    let samples = skip_ms * 1e-3 * sample_rate as f64;
    (samples / window_len as f64).ceil().max(0.0) as usize
}

/// Evaluates a fit on its kernels. Values are clamped at zero for reporting.
pub fn model_envelope(fit: &SlopeFit, kernels: &DecayKernelSet) -> Result<BandedEnvelope> {
    if fit.bands.len() != kernels.bands.len() {
        return Err(Error::Shape(format!(
            "fit has {} bands, kernels have {}",
            fit.bands.len(),
            kernels.bands.len()
        )));
    }
    let values = fit
        .bands
        .iter()
        .zip(&kernels.bands)
        .map(|(b, k)| {
            if b.center_hz != k.center_hz {
                return Err(Error::Shape(format!(
                    "band {} Hz fitted against kernels of {} Hz",
                    b.center_hz, k.center_hz
                )));
            }
            Ok(b.evaluate(k)?.into_iter().map(|v| v.max(0.0)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(BandedEnvelope {
        values,
        band_centers: kernels.bands.iter().map(|b| b.center_hz).collect(),
        window_len: kernels.window_len,
        sample_rate: kernels.sample_rate,
        hop: kernels.window_len,
        position_id: fit.position_id.clone(),
    })
}

/// Compressed-domain least squares over `x = [N, A_1, .., A_K]`.
pub(crate) struct EnvelopeProblem<'a> {
    pub(crate) sqrt_target: Vec<f64>,
    pub(crate) kernels: &'a BandKernels,
    pub(crate) skip_head: usize,
}

impl EnvelopeProblem<'_> {
    fn model(&self, x: &[f64], m: usize) -> f64 {
        x.iter()
            .zip(&self.kernels.columns)
            .map(|(p, col)| p * col[m])
            .sum()
    }
}

impl LeastSquares for EnvelopeProblem<'_> {
    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let n = self.kernels.len();
        DVector::from_iterator(
            n - self.skip_head,
            (self.skip_head..n).map(|m| self.sqrt_target[m] - floored_pow(self.model(x, m), 0.5)),
        )
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.kernels.len();
        let mut jac = DMatrix::zeros(n - self.skip_head, x.len());
        for (row, m) in (self.skip_head..n).enumerate() {
            let s = self.model(x, m);
            if s > POWER_FLOOR {
                let d = -0.5 / s.sqrt();
                for (j, col) in self.kernels.columns.iter().enumerate() {
                    jac[(row, j)] = d * col[m];
                }
            }
        }
        jac
    }
}

pub(crate) fn constraints_for(kernels: &BandKernels, mode: Mode) -> LinearConstraints {
    let dim = kernels.num_decays() + 1;
    let mut cons = LinearConstraints::new();
    cons.push_lower_bound(dim, 0, 0.0);
    match mode {
        Mode::PosOnly => {
            for k in 1..dim {
                cons.push_lower_bound(dim, k, 0.0);
            }
        }
        Mode::FadeIn => {
            for m in 0..kernels.len() {
                let row = (0..dim).map(|k| if k == 0 { 0.0 } else { kernels.columns[k][m] }).collect();
                cons.push(row, 0.0);
            }
        }
    }
    cons
}

/// Starting points: the unconstrained linear least-squares solution projected
/// onto the feasible set, and the constrained linear least-squares solution.
fn initial_points(target: &[f64], kernels: &BandKernels, skip_head: usize, cons: &LinearConstraints) -> Vec<Vec<f64>> {
    let dim = kernels.num_decays() + 1;
    let rows = skip_head..kernels.len();
    let mut gram = DMatrix::from_fn(dim, dim, |i, j| {
        rows.clone()
            .map(|m| kernels.columns[i][m] * kernels.columns[j][m])
            .sum::<f64>()
    });
    let rhs = DVector::from_fn(dim, |i, _| {
        rows.clone()
            .map(|m| kernels.columns[i][m] * target[m])
            .sum::<f64>()
    });
    let ridge = 1e-12 * (0..dim).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1e-300);
    for i in 0..dim {
        gram[(i, i)] += ridge;
    }
    let origin = vec![0.0; dim];
    let mut starts = Vec::with_capacity(2);

    if let Some(ls) = gram.clone().cholesky().map(|c| c.solve(&rhs)) {
        let projection = solve_qp(&DMatrix::identity(dim, dim), &(-&ls), cons, &origin, 2000);
        starts.push(projection.x);
    }
    let constrained = solve_qp(&gram, &(-rhs), cons, &origin, 2000);
    starts.push(constrained.x);
    starts
}

/// Fits one band envelope. Non-convergence is reported in the result, not as
/// an error.
pub fn fit_envelope(target: &[f64], kernels: &BandKernels, mode: Mode, skip_head: usize) -> Result<BandFit> {
    fit_envelope_with(target, kernels, mode, skip_head, &GaussNewtonOptions::default())
}

pub fn fit_envelope_with(
    target: &[f64],
    kernels: &BandKernels,
    mode: Mode,
    skip_head: usize,
    options: &GaussNewtonOptions,
) -> Result<BandFit> {
    if target.len() != kernels.len() {
        return Err(Error::Shape(format!(
            "target has {} points, kernels {}",
            target.len(),
            kernels.len()
        )));
    }
    if skip_head >= target.len() {
        return Err(Error::InvalidParameter(format!(
            "skip_head {skip_head} leaves no points of {}",
            target.len()
        )));
    }
    if let Some(v) = target.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("envelope value {v} is not a nonnegative number")));
    }
    let k = kernels.num_decays();
    let scale = target.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(BandFit::zero(kernels.center_hz, k, mode));
    }

    let normalized: Vec<f64> = target.iter().map(|v| v / scale).collect();
    let problem = EnvelopeProblem {
        sqrt_target: normalized.iter().map(|&v| floored_pow(v, 0.5)).collect(),
        kernels,
        skip_head,
    };

    let run = |mode: Mode, extra_start: Option<&[f64]>| {
        let cons = constraints_for(kernels, mode);
        let mut starts = initial_points(&normalized, kernels, skip_head, &cons);
        if let Some(s) = extra_start {
            starts.push(s.to_vec());
        }
        starts
            .iter()
            .map(|x0| gauss_newton(&problem, &cons, x0, options))
            .min_by(|a, b| a.objective.total_cmp(&b.objective))
            .expect("at least one start")
    };

    let report = match mode {
        Mode::PosOnly => run(Mode::PosOnly, None),
        Mode::FadeIn => {
            let pos = run(Mode::PosOnly, None);
            run(Mode::FadeIn, Some(&pos.x))
        }
    };

    // Bound constraints hold to rounding; snap such residue to the bound.
    let snap = |v: f64| if v < 0.0 && v > -FEASIBILITY_TOL { 0.0 } else { v };
    let fit = BandFit {
        center_hz: kernels.center_hz,
        amplitudes: report.x[1..]
            .iter()
            .map(|&a| if mode == Mode::PosOnly { snap(a) } else { a } * scale)
            .collect(),
        noise: snap(report.x[0]) * scale,
        mode,
        objective_value: report.objective * scale,
        iterations: report.iterations,
        converged: report.converged,
        feasible: true,
    };
    let feasible = fit.noise >= 0.0
        && match mode {
            Mode::PosOnly => fit.amplitudes.iter().all(|&a| a >= 0.0),
            Mode::FadeIn => fit.min_decay_part(kernels) >= -FEASIBILITY_TOL,
        };
    Ok(BandFit { feasible, ..fit })
}

fn check_grid(envelopes: &[BandedEnvelope], kernels: &DecayKernelSet) -> Result<()> {
    for env in envelopes {
        if env.num_bands() != kernels.bands.len() {
            return Err(Error::Shape(format!(
                "position {}: {} bands, kernels have {}",
                env.position_id,
                env.num_bands(),
                kernels.bands.len()
            )));
        }
        if env.len() != kernels.envelope_len || env.window_len != kernels.window_len {
            return Err(Error::Shape(format!(
                "position {}: envelope grid {}x{} differs from kernel grid {}x{}",
                env.position_id,
                env.len(),
                env.window_len,
                kernels.envelope_len,
                kernels.window_len
            )));
        }
        for (c, b) in env.band_centers.iter().zip(&kernels.bands) {
            if *c != b.center_hz {
                return Err(Error::Shape(format!(
                    "position {}: band {c} Hz does not match kernel band {} Hz",
                    env.position_id, b.center_hz
                )));
            }
        }
    }
    Ok(())
}

fn fit_one(env: &BandedEnvelope, kernels: &DecayKernelSet, mode: Mode, skip_head: usize) -> Result<SlopeFit> {
    let bands = env
        .values
        .iter()
        .zip(&kernels.bands)
        .map(|(values, bk)| fit_envelope(values, bk, mode, skip_head))
        .collect::<Result<Vec<_>>>()?;
    Ok(SlopeFit {
        position_id: env.position_id.clone(),
        mode,
        bands,
    })
}

/// Fits every band of every envelope, in parallel. Output order follows the
/// input and matches [`fit_dataset_sequential`] exactly.
pub fn fit_dataset(
    envelopes: &[BandedEnvelope],
    kernels: &DecayKernelSet,
    mode: Mode,
    skip_head: usize,
) -> Result<Vec<SlopeFit>> {
    check_grid(envelopes, kernels)?;
    envelopes
        .par_iter()
        .map(|env| fit_one(env, kernels, mode, skip_head))
        .collect()
}

pub fn fit_dataset_sequential(
    envelopes: &[BandedEnvelope],
    kernels: &DecayKernelSet,
    mode: Mode,
    skip_head: usize,
) -> Result<Vec<SlopeFit>> {
    check_grid(envelopes, kernels)?;
    envelopes
        .iter()
        .map(|env| fit_one(env, kernels, mode, skip_head))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{build_kernels, decay_rate_to_kernel, CommonTimes};
    use crate::signal::envelope_time;
    use crate::sim::{chain_response, RoomChain};
    use proptest::prelude::*;

    const FS: u32 = 48_000;

    fn kernels(times: &[f64]) -> BandKernels {
        build_kernels(
            &[CommonTimes { band_center: 1000.0, times: times.to_vec() }],
            200,
            240,
            FS,
        )
        .unwrap()
        .bands
        .remove(0)
    }

    fn synth_target(k: &BandKernels, amps: &[f64], noise: f64) -> Vec<f64> {
        BandFit { amplitudes: amps.to_vec(), noise, ..BandFit::zero(k.center_hz, amps.len(), Mode::FadeIn) }
            .evaluate(k)
            .unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn model_envelope_single_kernel_and_zero() {
        let k = kernels(&[0.8]);
        assert_eq!(synth_target(&k, &[1.0], 0.0), k.columns[1]);
        assert!(synth_target(&k, &[0.0], 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_envelope_reproduces_difference_of_exponentials() {
        let (d1, d2) = (20.0, 5.0);
        let k = kernels(&[decay_rate_to_kernel(d2), decay_rate_to_kernel(d1)]);
        // Kernels are sorted by decay time, so the fast room (d1) comes first.
        let a = 1.0 / (d2 - d1);
        let env = synth_target(&k, &[a, -a], 0.0);
        for (m, v) in env.iter().enumerate() {
            let t = envelope_time(m, 240) / FS as f64;
            let expected = ((-d1 * t).exp() - (-d2 * t).exp()) / (d2 - d1);
            assert!((v - expected).abs() < 1e-12);
        }
        let fit = SlopeFit {
            position_id: "x".into(),
            mode: Mode::FadeIn,
            bands: vec![BandFit { amplitudes: vec![1.0], ..BandFit::zero(1000.0, 1, Mode::FadeIn) }],
        };
        let set = build_kernels(&[CommonTimes { band_center: 1000.0, times: vec![0.8, 1.2] }], 200, 240, FS).unwrap();
        assert!(matches!(model_envelope(&fit, &set), Err(Error::Shape(_))));
    }

    #[test]
    fn fade_in_round_trip_recovers_parameters() {
        // The slower decay carries the positive amplitude so the noise-free
        // part stays positive for all t.
        let k = kernels(&[0.4, 1.6]);
        let (amps, noise) = ([-0.8, 1.0], 0.01);
        let target = synth_target(&k, &amps, noise);
        let fit = fit_envelope(&target, &k, Mode::FadeIn, 2).unwrap();
        assert!(fit.converged && fit.feasible);
        for (a, b) in fit.amplitudes.iter().zip(&amps) {
            assert!(rel(*a, *b) < 1e-6, "{:?}", fit.amplitudes);
        }
        assert!(rel(fit.noise, noise) < 1e-6);
        assert!(fit.objective_value < 1e-10);
    }

    #[test]
    fn pos_only_exact_single_kernel() {
        let k = kernels(&[0.5, 1.0, 2.0]);
        let target = k.columns[1].clone();
        let fit = fit_envelope(&target, &k, Mode::PosOnly, 0).unwrap();
        assert!((fit.amplitudes[0] - 1.0).abs() < 1e-6, "{fit:?}");
        assert!(fit.amplitudes[1..].iter().all(|a| a.abs() < 1e-6));
        assert!(fit.objective_value < 1e-10);
        assert!(fit.amplitudes.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn zero_target_gives_zero_fit() {
        let k = kernels(&[0.5, 1.0]);
        let fit = fit_envelope(&[0.0; 200], &k, Mode::FadeIn, 2).unwrap();
        assert_eq!(fit.amplitudes, vec![0.0, 0.0]);
        assert_eq!(fit.noise, 0.0);
    }

    #[test]
    fn input_errors() {
        let k = kernels(&[0.5]);
        assert!(matches!(fit_envelope(&[1.0; 10], &k, Mode::FadeIn, 0), Err(Error::Shape(_))));
        assert!(fit_envelope(&[1.0; 200], &k, Mode::FadeIn, 200).is_err());
        let mut bad = vec![1.0; 200];
        bad[3] = -1.0;
        assert!(matches!(fit_envelope(&bad, &k, Mode::FadeIn, 0), Err(Error::Domain(_))));
    }

    fn two_room_envelope(seed: u64) -> Vec<f64> {
        let chain = RoomChain::new(vec![20.0, 5.0], 48_000, FS, seed).unwrap();
        crate::signal::rms_envelope(&chain_response(&chain).unwrap(), 240).unwrap()
    }

    #[test]
    fn simulated_fade_in_has_opposite_signs() {
        let k = kernels(&[decay_rate_to_kernel(5.0), decay_rate_to_kernel(20.0)]);
        let target = two_room_envelope(3);
        let fade = fit_envelope(&target, &k, Mode::FadeIn, 2).unwrap();
        let pos = fit_envelope(&target, &k, Mode::PosOnly, 2).unwrap();
        // Fast room negative, slow room positive: 1/(d2 - d1) and
        // -1/(d2 - d1) with d1 = 20 and d2 = 5.
        assert!(fade.amplitudes[0] < 0.0 && fade.amplitudes[1] > 0.0, "{fade:?}");
        assert!(fade.objective_value < pos.objective_value);
        assert!(fade.feasible && pos.feasible);
    }

    #[test]
    fn kkt_stationarity() {
        let k = kernels(&[decay_rate_to_kernel(5.0), decay_rate_to_kernel(20.0)]);
        let target = two_room_envelope(8);
        let scale = target.iter().cloned().fold(0.0, f64::max);
        for mode in [Mode::FadeIn, Mode::PosOnly] {
            let fit = fit_envelope(&target, &k, mode, 2).unwrap();
            let x: Vec<f64> = std::iter::once(fit.noise / scale)
                .chain(fit.amplitudes.iter().map(|a| a / scale))
                .collect();
            let problem = EnvelopeProblem {
                sqrt_target: target.iter().map(|v| (v / scale).max(POWER_FLOOR).sqrt()).collect(),
                kernels: &k,
                skip_head: 2,
            };
            let r = problem.residuals(&x);
            let grad = 2.0 * problem.jacobian(&x).transpose() * &r;
            // Central finite differences of the objective.
            for j in 0..x.len() {
                let h = 1e-7 * x[j].abs().max(1e-3);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (problem.objective(&xp) - problem.objective(&xm)) / (2.0 * h);
                assert!((fd - grad[j]).abs() <= 1e-4 * grad.amax().max(1e-6), "{mode} {j}: {fd} vs {}", grad[j]);
            }
            // grad = sum_i lambda_i a_i over active constraints, lambda >= 0.
            let cons = constraints_for(&k, mode);
            let active = cons.active(&x, 1e-9);
            let a = DMatrix::from_fn(x.len(), active.len(), |i, j| cons.rows[active[j]][i]);
            let lambda = if active.is_empty() {
                DVector::zeros(0)
            } else {
                let h = a.transpose() * &a + DMatrix::identity(active.len(), active.len()) * 1e-14;
                let c = -(a.transpose() * &grad);
                let mut bounds = LinearConstraints::new();
                for i in 0..active.len() {
                    bounds.push_lower_bound(active.len(), i, 0.0);
                }
                DVector::from_vec(solve_qp(&h, &c, &bounds, &vec![0.0; active.len()], 1000).x)
            };
            let projected = if active.is_empty() { grad.clone() } else { &grad - &a * &lambda };
            assert!(projected.norm() < 1e-6, "{mode}: projected gradient {}", projected.norm());
        }
    }

    #[test]
    fn dataset_parallel_matches_sequential() {
        let set = build_kernels(
            &[CommonTimes { band_center: 1000.0, times: vec![decay_rate_to_kernel(5.0), decay_rate_to_kernel(20.0)] }],
            200,
            240,
            FS,
        )
        .unwrap();
        let envs: Vec<BandedEnvelope> = (0..12)
            .map(|i| BandedEnvelope {
                values: vec![two_room_envelope(100 + i)],
                band_centers: vec![1000.0],
                window_len: 240,
                sample_rate: FS,
                hop: 240,
                position_id: format!("p{i}"),
            })
            .collect();
        let par = fit_dataset(&envs, &set, Mode::FadeIn, 2).unwrap();
        let seq = fit_dataset_sequential(&envs, &set, Mode::FadeIn, 2).unwrap();
        assert_eq!(par, seq);
        assert!(fit_dataset(&[], &set, Mode::FadeIn, 2).unwrap().is_empty());
        let single = fit_dataset(&envs[..1], &set, Mode::PosOnly, 2).unwrap();
        assert_eq!(single[0].bands[0], fit_envelope(&envs[0].values[0], &set.bands[0], Mode::PosOnly, 2).unwrap());
    }

    #[test]
    fn skip_head_for_eight_ms() {
        assert_eq!(skip_head_points(8.0, 240, 48_000), 2);
        assert_eq!(skip_head_points(0.0, 240, 48_000), 0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("fadein".parse::<Mode>().unwrap(), Mode::FadeIn);
        assert_eq!("FADE-IN".parse::<Mode>().unwrap(), Mode::FadeIn);
        assert_eq!("pos_only".parse::<Mode>().unwrap(), Mode::PosOnly);
        assert!("both".parse::<Mode>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn nesting_and_feasibility(seed in 0u64..10_000, n_decays in 1usize..4) {
            let times = [decay_rate_to_kernel(5.0), decay_rate_to_kernel(10.0), decay_rate_to_kernel(20.0)];
            let k = kernels(&times[..n_decays]);
            let rates = [20.0, 5.0];
            let chain = RoomChain::new(rates.to_vec(), 48_000, FS, seed).unwrap();
            let target = crate::signal::rms_envelope(&chain_response(&chain).unwrap(), 240).unwrap();
            let fade = fit_envelope(&target, &k, Mode::FadeIn, 2).unwrap();
            let pos = fit_envelope(&target, &k, Mode::PosOnly, 2).unwrap();
            prop_assert!(fade.objective_value <= pos.objective_value + 1e-12);
            prop_assert!(fade.min_decay_part(&k) >= -1e-9);
            prop_assert!(pos.amplitudes.iter().all(|&a| a >= 0.0));
            prop_assert!(fade.noise >= 0.0 && pos.noise >= 0.0);
        }

        #[test]
        fn scale_equivariance(seed in 0u64..10_000, c in 0.01f64..100.0) {
            let k = kernels(&[decay_rate_to_kernel(5.0), decay_rate_to_kernel(20.0)]);
            let target = two_room_envelope(seed);
            let scaled: Vec<f64> = target.iter().map(|v| c * v).collect();
            for mode in [Mode::FadeIn, Mode::PosOnly] {
                let a = fit_envelope(&target, &k, mode, 2).unwrap();
                let b = fit_envelope(&scaled, &k, mode, 2).unwrap();
                let peak = a.amplitudes.iter().chain([&a.noise]).fold(0.0f64, |m, v| m.max(v.abs()));
                for (x, y) in a.amplitudes.iter().chain([&a.noise]).zip(b.amplitudes.iter().chain([&b.noise])) {
                    prop_assert!((c * x - y).abs() <= 1e-6 * c * peak);
                }
            }
        }

        #[test]
        fn modes_agree_on_decaying_targets(a1 in 0.05f64..1.0, a2 in 0.05f64..1.0, noise in 0.0f64..0.01) {
            let k = kernels(&[0.5, 2.0]);
            let target = synth_target(&k, &[a1, a2], noise);
            let fade = fit_envelope(&target, &k, Mode::FadeIn, 2).unwrap();
            let pos = fit_envelope(&target, &k, Mode::PosOnly, 2).unwrap();
            for (x, y) in fade.amplitudes.iter().zip(&pos.amplitudes) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1e-3));
            }
        }
    }
}
