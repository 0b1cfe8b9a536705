//! Batch commands and their on-disk formats.
//!
//! * `simulate`: JSON config in, mono 32-bit float WAVs plus `manifest.json` out.
//! * `fit`: directory of WAVs in, `params.json` plus CSV reports out.
//! * `synth`: `params.json` in, one broadband WAV per position plus `synth.json`.
//! * `metrics`: `params.json` and a WAV directory in, a CSV table out.
//!
//! Every command is deterministic given its inputs and seed. Parallel stages
//! collect results in input order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay::{
    build_kernels, cluster_decay_times_per_band, fit_edf_decays, CommonTimes, DecayEstimate,
    DecayKernelSet,
};
use crate::metrics::{c50, envelope_rmse};
use crate::rng::{derive_seed, gaussian_noise};
use crate::signal::{
    default_window_len, envelope_time, octave_filterbank, rms_envelope, schroeder_edf,
    BandedEnvelope, Edf, Rir, DEFAULT_BAND_CENTERS,
};
use crate::sim::{chain_response, RoomChain};
use crate::slope_fit::{
    fit_dataset, model_envelope, skip_head_points, BandFit, Mode, SlopeFit, DEFAULT_SKIP_MS,
};
use crate::synthesis::{synth_band, synth_broadband};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PARAMS_FILE: &str = "params.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTH_METADATA_FILE: &str = "synth.json";

/// Share of each EDF, at the tail, left out of decay estimation. The end of
/// a backward integral holds too little energy to constrain a slope.
const EDF_TAIL_CROP: f64 = 0.05;
const MAX_DECAYS_PER_RIR: usize = 3;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e.into() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

// WAV

/// Reads a mono WAV file. The position id is the file stem.
pub fn read_wav(path: &Path) -> Result<Rir> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Ingestion(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let full_scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
        (format, bits) => {
            return Err(Error::Ingestion(format!(
                "{}: unsupported encoding {format:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Rir::new(samples, spec.sample_rate, id)
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, rir: &Rir) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rir.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in &rir.samples {
        writer.write_sample(s as f32).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

/// All `*.wav` files of a directory, sorted by file name.
pub fn read_dataset(dir: &Path) -> Result<Vec<Rir>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    let rirs = paths.iter().map(|p| read_wav(p)).collect::<Result<Vec<_>>>()?;
    check_sample_rates(&rirs)?;
    Ok(rirs)
}

/// Fails with every position whose rate differs from the most common one.
fn check_sample_rates(rirs: &[Rir]) -> Result<()> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for r in rirs {
        *counts.entry(r.sample_rate).or_default() += 1;
    }
    if counts.len() <= 1 {
        return Ok(());
    }
    let common = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(rate, _)| *rate)
        .unwrap_or_default();
    let offenders: Vec<String> = rirs
        .iter()
        .filter(|r| r.sample_rate != common)
        .map(|r| format!("{} ({} Hz)", r.position_id, r.sample_rate))
        .collect();
    Err(Error::Ingestion(format!(
        "mixed sample rates, expected {common} Hz: {}",
        offenders.join(", ")
    )))
}

// simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Samples per response.
    pub length: usize,
    pub seed: u64,
    /// Standard deviation of additive white noise.
    #[serde(default)]
    pub noise_floor: f64,
    #[serde(default)]
    pub preset: Option<PresetConfig>,
    #[serde(default)]
    pub positions: Vec<PositionConfig>,
}

fn default_sample_rate() -> u32 {
    48_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub name: String,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionConfig {
    pub id: String,
    /// Decay rates (1/s) of the rooms the sound passes, source room first.
    pub decay_rates: Vec<f64>,
}

pub const THREE_ROOM_PRESET: &str = "three_room";

/// Chains of the three-room preset: a receiver in the source room, and one in
/// each of two rooms coupled to it.
pub const THREE_ROOM_CHAINS: [(&str, &[f64]); 3] =
    [("r1", &[20.0]), ("r2", &[20.0, 5.0]), ("r3", &[20.0, 10.0])];

impl SimulationConfig {
    /// Three-room preset with `positions` receivers spread round-robin over
    /// the rooms.
    pub fn three_room(positions: usize, length: usize, seed: u64) -> Self {
        Self {
            sample_rate: default_sample_rate(),
            length,
            seed,
            noise_floor: 0.0,
            preset: Some(PresetConfig { name: THREE_ROOM_PRESET.into(), positions }),
            positions: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: match e.path().to_string() {
                p if p == "." => "<root>".into(),
                p => p,
            },
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: String, message: &str| Err(Error::Config { path, message: message.into() });
        if self.sample_rate == 0 {
            return fail("sample_rate".into(), "must be positive");
        }
        if self.length == 0 {
            return fail("length".into(), "must be positive");
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return fail("noise_floor".into(), "must be a nonnegative number");
        }
        if let Some(p) = &self.preset {
            if p.name != THREE_ROOM_PRESET {
                return fail("preset.name".into(), "unknown preset (expected `three_room`)");
            }
        }
        let mut seen = BTreeSet::new();
        for (i, pos) in self.expand().iter().enumerate() {
            let at = |field: &str| match self.preset_len() {
                n if i < n => format!("preset.positions[{i}].{field}"),
                n => format!("positions[{}].{field}", i - n),
            };
            if pos.id.is_empty()
                || !pos.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                || pos.id.starts_with('.')
            {
                return fail(at("id"), "must be non-empty and use only letters, digits, `-`, `_` and `.`");
            }
            if !seen.insert(pos.id.clone()) {
                return fail(at("id"), "duplicate position id");
            }
            if pos.decay_rates.is_empty() {
                return fail(at("decay_rates"), "needs at least one room");
            }
            for (k, d) in pos.decay_rates.iter().enumerate() {
                if !(*d > 0.0 && d.is_finite()) {
                    return fail(at(&format!("decay_rates[{k}]")), "must be a positive number");
                }
            }
        }
        Ok(())
    }

    fn preset_len(&self) -> usize {
        self.preset.as_ref().map_or(0, |p| p.positions)
    }

    /// Preset positions followed by explicit ones.
    pub fn expand(&self) -> Vec<PositionConfig> {
        let preset = (0..self.preset_len()).map(|i| {
            let (room, rates) = THREE_ROOM_CHAINS[i % THREE_ROOM_CHAINS.len()];
            PositionConfig { id: format!("pos{i:03}_{room}"), decay_rates: rates.to_vec() }
        });
        preset.chain(self.positions.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub length: usize,
    pub seed: u64,
    pub noise_floor: f64,
    pub tool_version: String,
    pub positions: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub decay_rates: Vec<f64>,
    pub seed: u64,
}

/// Responses of every configured position, in configuration order.
pub fn simulate_positions(cfg: &SimulationConfig) -> Result<(Manifest, Vec<Rir>)> {
    cfg.validate()?;
    let positions = cfg.expand();
    let rirs = positions
        .par_iter()
        .enumerate()
        .map(|(i, pos)| {
            let seed = derive_seed(cfg.seed, &[i as u64]);
            let chain = RoomChain::new(pos.decay_rates.clone(), cfg.length, cfg.sample_rate, seed)?;
            let mut rir = chain_response(&chain)?;
            if cfg.noise_floor > 0.0 {
                let noise = gaussian_noise(cfg.length, derive_seed(seed, &[u64::MAX]));
                for (s, n) in rir.samples.iter_mut().zip(noise) {
                    *s += cfg.noise_floor * n;
                }
            }
            rir.position_id = pos.id.clone();
            Ok((ManifestEntry {
                id: pos.id.clone(),
                file: format!("{}.wav", pos.id),
                decay_rates: pos.decay_rates.clone(),
                seed,
            }, rir))
        })
        .collect::<Result<Vec<_>>>()?;
    let (entries, rirs) = rirs.into_iter().unzip();
    Ok((
        Manifest {
            sample_rate: cfg.sample_rate,
            length: cfg.length,
            seed: cfg.seed,
            noise_floor: cfg.noise_floor,
            tool_version: TOOL_VERSION.into(),
            positions: entries,
        },
        rirs,
    ))
}

/// Writes `<id>.wav` per position and `manifest.json` into `out_dir`.
pub fn simulate_to_dir(cfg: &SimulationConfig, out_dir: &Path) -> Result<Manifest> {
    let (manifest, rirs) = simulate_positions(cfg)?;
    create_dir(out_dir)?;
    for (entry, rir) in manifest.positions.iter().zip(&rirs) {
        write_wav(&out_dir.join(&entry.file), rir)?;
    }
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn cmd_simulate(config: &Path, out_dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(config).map_err(io_err(config))?;
    simulate_to_dir(&SimulationConfig::from_json(&text)?, out_dir)
}

// parameter file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub sample_rate: u32,
    pub window_len: usize,
    pub envelope_len: usize,
    pub skip_ms: f64,
    pub bands: Vec<BandParams>,
    pub mode: Mode,
    pub tool_version: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    pub center_hz: f64,
    /// Time in seconds at which each kernel has decayed to 1e-6.
    pub decay_times_s: Vec<f64>,
    pub positions: Vec<PositionParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionParams {
    pub id: String,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
}

impl ParamFile {
    pub fn read(path: &Path) -> Result<Self> {
        let params: Self = read_json(path)?;
        params.validate().map_err(|e| match e {
            Error::Config { path: field, message } => Error::Config {
                path: format!("{}: {field}", path.display()),
                message,
            },
            other => other,
        })?;
        Ok(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("parameter file serializes");
        text.push('\n');
        text
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: String, message: &str| Err(Error::Config { path, message: message.into() });
        if self.sample_rate == 0 || self.window_len == 0 {
            return fail("sample_rate".into(), "sample rate and window length must be positive");
        }
        let ids = self.position_ids();
        for (b, band) in self.bands.iter().enumerate() {
            if band.positions.len() != ids.len() {
                return fail(format!("bands[{b}].positions"), "positions differ from the first band");
            }
            for (p, pos) in band.positions.iter().enumerate() {
                if pos.id != ids[p] {
                    return fail(format!("bands[{b}].positions[{p}].id"), "positions differ from the first band");
                }
                if pos.amplitudes.len() != band.decay_times_s.len() {
                    return fail(
                        format!("bands[{b}].positions[{p}].amplitudes"),
                        "one amplitude per decay time expected",
                    );
                }
            }
        }
        Ok(())
    }

    pub fn position_ids(&self) -> Vec<String> {
        self.bands
            .first()
            .map(|b| b.positions.iter().map(|p| p.id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn position_index(&self, id: &str) -> Result<usize> {
        self.bands
            .first()
            .and_then(|b| b.positions.iter().position(|p| p.id == id))
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn band_centers(&self) -> Vec<f64> {
        self.bands.iter().map(|b| b.center_hz).collect()
    }

    pub fn kernels(&self) -> Result<DecayKernelSet> {
        let times: Vec<CommonTimes> = self
            .bands
            .iter()
            .map(|b| CommonTimes { band_center: b.center_hz, times: b.decay_times_s.clone() })
            .collect();
        build_kernels(&times, self.envelope_len, self.window_len, self.sample_rate)
    }

    pub fn skip_head(&self) -> usize {
        skip_head_points(self.skip_ms, self.window_len, self.sample_rate)
    }

    /// Fit of position `index` in the form used by [`model_envelope`].
    pub fn slope_fit(&self, index: usize) -> SlopeFit {
        let bands = self
            .bands
            .iter()
            .map(|b| {
                let p = &b.positions[index];
                BandFit {
                    center_hz: b.center_hz,
                    amplitudes: p.amplitudes.clone(),
                    noise: p.noise,
                    mode: self.mode,
                    objective_value: f64::NAN,
                    iterations: 0,
                    converged: true,
                    feasible: true,
                }
            })
            .collect();
        SlopeFit { position_id: self.position_ids()[index].clone(), mode: self.mode, bands }
    }

    /// Modelled band envelopes of position `index`.
    pub fn model_envelope(&self, index: usize) -> Result<BandedEnvelope> {
        model_envelope(&self.slope_fit(index), &self.kernels()?)
    }
}

// fit

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub bands: Vec<f64>,
    /// One value for all bands, or one per band.
    pub k_per_band: Vec<usize>,
    pub mode: Mode,
    pub skip_ms: f64,
    pub seed: u64,
    /// Defaults to about 200 envelope points per response.
    pub window_len: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BAND_CENTERS.to_vec(),
            k_per_band: vec![3],
            mode: Mode::FadeIn,
            skip_ms: DEFAULT_SKIP_MS,
            seed: 0,
            window_len: None,
        }
    }
}

impl FitOptions {
    fn k_for(&self, band: usize) -> Result<usize> {
        match self.k_per_band.as_slice() {
            [k] => Ok(*k),
            ks if ks.len() == self.bands.len() => Ok(ks[band]),
            ks => Err(Error::InvalidParameter(format!(
                "{} values for k per band with {} bands",
                ks.len(),
                self.bands.len()
            ))),
        }
    }
}

/// Everything produced by the fitting pipeline.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: ParamFile,
    pub estimates: Vec<DecayEstimate>,
    pub common_times: Vec<CommonTimes>,
    pub envelopes: Vec<BandedEnvelope>,
    pub edfs: Vec<Vec<Edf>>,
    pub fits: Vec<SlopeFit>,
}

/// Filterbank, envelopes, decay estimation, clustering and amplitude fits of
/// a set of responses sharing one sample rate. Responses are cut to the
/// shortest length so all envelopes share a grid.
pub fn fit_rirs(rirs: &[Rir], opts: &FitOptions) -> Result<FitOutput> {
    if rirs.is_empty() {
        return Err(Error::InsufficientData("no responses to fit".into()));
    }
    check_sample_rates(rirs)?;
    let ks = (0..opts.bands.len()).map(|b| opts.k_for(b)).collect::<Result<Vec<_>>>()?;
    let fs = rirs[0].sample_rate;
    let len = rirs.iter().map(Rir::len).min().unwrap_or(0);
    let window_len = opts.window_len.unwrap_or_else(|| default_window_len(len));
    if window_len == 0 || window_len > len {
        return Err(Error::InvalidWindow(format!("window length {window_len} for {len} samples")));
    }
    let envelope_len = len / window_len;

    struct Analysis {
        envelope: BandedEnvelope,
        edfs: Vec<Edf>,
        estimates: Vec<DecayEstimate>,
    }
    let analyses = rirs
        .par_iter()
        .map(|rir| {
            let mut rir = rir.clone();
            rir.samples.truncate(len);
            let bands = octave_filterbank(&rir, &opts.bands)?;
            let envelope = BandedEnvelope::from_bands(&bands, window_len)?;
            let mut edfs = Vec::with_capacity(bands.len());
            let mut estimates = Vec::with_capacity(bands.len());
            for band in &bands {
                let mut edf = schroeder_edf(band, false)?;
                let keep = ((1.0 - EDF_TAIL_CROP) * edf.len() as f64).ceil() as usize;
                let estimate = fit_edf_decays(
                    &Edf { values: edf.values[..keep.max(2)].to_vec(), normalized: false },
                    fs,
                    MAX_DECAYS_PER_RIR,
                )?;
                estimates.push(estimate.labelled(band.band.unwrap_or(0.0), &rir.position_id));
                edf.values.truncate(envelope_len * window_len);
                edfs.push(edf);
            }
            Ok(Analysis { envelope, edfs, estimates })
        })
        .collect::<Result<Vec<_>>>()?;

    let estimates: Vec<DecayEstimate> = analyses.iter().flat_map(|a| a.estimates.clone()).collect();
    let k_of: HashMap<u64, usize> = opts.bands.iter().zip(&ks).map(|(b, k)| (b.to_bits(), *k)).collect();
    let common_times = cluster_decay_times_per_band(&estimates, |b| k_of[&b.to_bits()], opts.seed)?;
    let kernels = build_kernels(&common_times, envelope_len, window_len, fs)?;
    let skip_head = skip_head_points(opts.skip_ms, window_len, fs);
    let envelopes: Vec<BandedEnvelope> = analyses.iter().map(|a| a.envelope.clone()).collect();
    let fits = fit_dataset(&envelopes, &kernels, opts.mode, skip_head)?;

    let params = ParamFile {
        sample_rate: fs,
        window_len,
        envelope_len,
        skip_ms: opts.skip_ms,
        bands: kernels
            .bands
            .iter()
            .enumerate()
            .map(|(b, k)| BandParams {
                center_hz: k.center_hz,
                decay_times_s: k.decay_times.clone(),
                positions: fits
                    .iter()
                    .map(|f| PositionParams {
                        id: f.position_id.clone(),
                        amplitudes: f.bands[b].amplitudes.clone(),
                        noise: f.bands[b].noise,
                    })
                    .collect(),
            })
            .collect(),
        mode: opts.mode,
        tool_version: TOOL_VERSION.into(),
        seed: opts.seed,
    };
    Ok(FitOutput {
        params,
        estimates,
        common_times,
        edfs: analyses.into_iter().map(|a| a.edfs).collect(),
        envelopes,
        fits,
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Runs [`fit_rirs`] on a WAV directory and writes into `out_dir`:
/// `params.json`, `residuals.csv` and the plot tables `envelopes.csv`,
/// `edc.csv` and `amplitudes.csv`.
pub fn cmd_fit(dataset: &Path, opts: &FitOptions, out_dir: &Path) -> Result<FitOutput> {
    let rirs = read_dataset(dataset)?;
    let out = fit_rirs(&rirs, opts)?;
    create_dir(out_dir)?;
    out.params.write(&out_dir.join(PARAMS_FILE))?;
    write_fit_reports(&out, out_dir)?;
    Ok(out)
}

fn write_fit_reports(out: &FitOutput, out_dir: &Path) -> Result<()> {
    let p = &out.params;
    let skip_head = p.skip_head();
    let models = (0..out.fits.len()).map(|i| p.model_envelope(i)).collect::<Result<Vec<_>>>()?;
    let time = |m: usize| envelope_time(m, p.window_len) / p.sample_rate as f64;

    let path = out_dir.join("residuals.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["position_id", "band_hz", "objective", "envelope_rmse", "iterations", "converged", "feasible"])
        .map_err(csv_err(&path))?;
    for ((fit, env), model) in out.fits.iter().zip(&out.envelopes).zip(&models) {
        for (b, bf) in fit.bands.iter().enumerate() {
            let rmse = envelope_rmse(&model.values[b], &env.values[b], skip_head)?;
            w.write_record([
                fit.position_id.clone(),
                num(bf.center_hz),
                num(bf.objective_value),
                num(rmse),
                bf.iterations.to_string(),
                bf.converged.to_string(),
                bf.feasible.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("envelopes.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["position_id", "band_hz", "time_s", "measured", "model"]).map_err(csv_err(&path))?;
    for (env, model) in out.envelopes.iter().zip(&models) {
        for (b, center) in env.band_centers.iter().enumerate() {
            for m in 0..env.len() {
                w.write_record([
                    env.position_id.clone(),
                    num(*center),
                    num(time(m)),
                    num(env.values[b][m]),
                    num(model.values[b][m]),
                ])
                .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;

    // Energy decay curves on the envelope grid, both normalized to 0 dB.
    let path = out_dir.join("edc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["position_id", "band_hz", "time_s", "measured_db", "model_db"]).map_err(csv_err(&path))?;
    for ((env, edfs), model) in out.envelopes.iter().zip(&out.edfs).zip(&models) {
        for (b, center) in env.band_centers.iter().enumerate() {
            let measured: Vec<f64> = (0..env.len()).map(|m| edfs[b].values[m * p.window_len]).collect();
            let mut acc = 0.0;
            let mut modelled: Vec<f64> = model.values[b]
                .iter()
                .rev()
                .map(|v| {
                    acc += v * v;
                    acc
                })
                .collect();
            modelled.reverse();
            let db = |v: f64, v0: f64| if v0 > 0.0 { 10.0 * (v / v0).log10() } else { f64::NEG_INFINITY };
            for m in 0..env.len() {
                w.write_record([
                    env.position_id.clone(),
                    num(*center),
                    num(m as f64 * p.window_len as f64 / p.sample_rate as f64),
                    num(db(measured[m], measured[0])),
                    num(db(modelled[m], modelled[0])),
                ])
                .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("amplitudes.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["position_id", "band_hz", "component", "decay_time_s", "amplitude"]).map_err(csv_err(&path))?;
    for band in &p.bands {
        for pos in &band.positions {
            for (k, (t, a)) in band.decay_times_s.iter().zip(&pos.amplitudes).enumerate() {
                w.write_record([pos.id.clone(), num(band.center_hz), format!("decay{k}"), num(*t), num(*a)])
                    .map_err(csv_err(&path))?;
            }
            w.write_record([pos.id.clone(), num(band.center_hz), "noise".into(), String::new(), num(pos.noise)])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))
}

// synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub seed: u64,
    pub tool_version: String,
    pub positions: Vec<SynthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub id: String,
    pub file: String,
    pub band_seeds: Vec<u64>,
}

/// Noise seed of band `band` of position `index`.
pub fn band_seed(seed: u64, index: usize, band: usize) -> u64 {
    derive_seed(seed, &[index as u64, band as u64])
}

/// Band RIRs and their sum for position `index` of a parameter file.
pub fn synthesize_position(params: &ParamFile, index: usize, seed: u64) -> Result<(Rir, Vec<Rir>)> {
    let model = params.model_envelope(index)?;
    let id = model.position_id.clone();
    let bands = model
        .values
        .par_iter()
        .zip(&model.band_centers)
        .enumerate()
        .map(|(b, (env, &center))| {
            let mut rir = synth_band(env, center, params.window_len, params.sample_rate, band_seed(seed, index, b))?;
            rir.position_id = id.clone();
            Ok(rir)
        })
        .collect::<Result<Vec<_>>>()?;
    let broadband = synth_broadband(&bands)?;
    Ok((broadband, bands))
}

/// Positions selected by `ids` (all when `None`), as indices into `params`.
fn select(params: &ParamFile, ids: Option<&[String]>) -> Result<Vec<usize>> {
    match ids {
        None => Ok((0..params.position_ids().len()).collect()),
        Some(ids) => ids.iter().map(|id| params.position_index(id)).collect(),
    }
}

/// Writes `<id>.wav` (broadband) per selected position and `synth.json`.
pub fn cmd_synth(params_path: &Path, ids: Option<&[String]>, seed: u64, out_dir: &Path) -> Result<SynthMetadata> {
    let params = ParamFile::read(params_path)?;
    let selected = select(&params, ids)?;
    create_dir(out_dir)?;
    let all_ids = params.position_ids();
    let mut positions = Vec::with_capacity(selected.len());
    for &i in &selected {
        let (rir, _) = synthesize_position(&params, i, seed)?;
        let file = format!("{}.wav", all_ids[i]);
        write_wav(&out_dir.join(&file), &rir)?;
        positions.push(SynthEntry {
            id: all_ids[i].clone(),
            file,
            band_seeds: (0..params.bands.len()).map(|b| band_seed(seed, i, b)).collect(),
        });
    }
    let meta = SynthMetadata { seed, tool_version: TOOL_VERSION.into(), positions };
    write_json(&out_dir.join(SYNTH_METADATA_FILE), &meta)?;
    Ok(meta)
}

// metrics

/// One row of the metrics table. `band` is `None` for the broadband row,
/// which carries no envelope RMSE.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub position_id: String,
    pub band: Option<f64>,
    pub rmse: Option<f64>,
    pub summed_rmse: f64,
    pub c50_ref: f64,
    pub c50_model: f64,
    pub c50_error: f64,
}

pub const METRICS_HEADER: [&str; 7] =
    ["position_id", "band", "rmse", "summed_rmse", "c50_ref", "c50_model", "c50_error"];

impl MetricsRow {
    fn record(&self) -> [String; 7] {
        [
            self.position_id.clone(),
            self.band.map_or_else(|| "broadband".into(), num),
            self.rmse.map_or_else(String::new, num),
            num(self.summed_rmse),
            num(self.c50_ref),
            num(self.c50_model),
            num(self.c50_error),
        ]
    }
}

/// Envelope RMSE of the model against each reference, per band and summed
/// over bands, and C50 of the reference against a synthesized response, per
/// band and broadband.
pub fn compute_metrics(params: &ParamFile, references: &[Rir], ids: Option<&[String]>, seed: u64) -> Result<Vec<MetricsRow>> {
    let selected = select(params, ids)?;
    let all_ids = params.position_ids();
    let by_id: HashMap<&str, &Rir> = references.iter().map(|r| (r.position_id.as_str(), r)).collect();
    let len = params.envelope_len * params.window_len;
    let centers = params.band_centers();
    let skip_head = params.skip_head();

    let per_position = selected
        .par_iter()
        .map(|&i| {
            let id = &all_ids[i];
            let reference = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Alignment(format!("position `{id}` has no reference response")))?;
            if reference.sample_rate != params.sample_rate {
                return Err(Error::Alignment(format!(
                    "position `{id}`: reference at {} Hz, parameters at {} Hz",
                    reference.sample_rate, params.sample_rate
                )));
            }
            if reference.len() < len {
                return Err(Error::Alignment(format!(
                    "position `{id}`: reference has {} samples, parameters cover {len}",
                    reference.len()
                )));
            }
            let mut reference = (*reference).clone();
            reference.samples.truncate(len);
            let ref_bands = octave_filterbank(&reference, &centers)?;
            let model = params.model_envelope(i)?;
            let (synth, synth_bands) = synthesize_position(params, i, seed)?;

            let rmse = ref_bands
                .iter()
                .zip(&model.values)
                .map(|(rb, mv)| envelope_rmse(mv, &rms_envelope(rb, params.window_len)?, skip_head))
                .collect::<Result<Vec<_>>>()?;
            let summed: f64 = rmse.iter().sum();
            let row = |band: Option<f64>, rmse: Option<f64>, r: &Rir, s: &Rir| -> Result<MetricsRow> {
                let (c_ref, c_model) = (c50(r)?, c50(s)?);
                Ok(MetricsRow {
                    position_id: id.clone(),
                    band,
                    rmse,
                    summed_rmse: summed,
                    c50_ref: c_ref,
                    c50_model: c_model,
                    c50_error: c_ref - c_model,
                })
            };
            let mut rows = Vec::with_capacity(centers.len() + 1);
            for (b, &center) in centers.iter().enumerate() {
                rows.push(row(Some(center), Some(rmse[b]), &ref_bands[b], &synth_bands[b])?);
            }
            rows.push(row(None, None, &reference, &synth)?);
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_position.into_iter().flatten().collect())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn cmd_metrics(
    params_path: &Path,
    dataset: &Path,
    ids: Option<&[String]>,
    seed: u64,
    out_csv: &Path,
) -> Result<Vec<MetricsRow>> {
    let params = ParamFile::read(params_path)?;
    let references = read_dataset(dataset)?;
    let rows = compute_metrics(&params, &references, ids, seed)?;
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_metrics_csv(out_csv, &rows)?;
    Ok(rows)
}
