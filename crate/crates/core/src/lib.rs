//! Common-slope reverberation modelling with fade-in.
//!
//! Room impulse responses are split into octave bands, reduced to short-term
//! RMS envelopes and described as a noise floor plus a weighted sum of
//! exponential decay kernels whose decay times are shared by every position
//! in the environment. Amplitudes may be negative (`Mode::FadeIn`) so that
//! room-to-room responses without line of sight, whose reverberant energy
//! first rises and then decays, can be represented. `Mode::PosOnly` keeps the
//! classic nonnegative model for comparison.
//!
//! Module map:
//!
//! * [`signal`]: filterbank, RMS envelopes, Schroeder integration, power scaling
//! * [`decay`]: per-RIR decay estimation, K-means common decay times, kernels
//! * [`slope_fit`]: constrained Gauss-Newton fitting of envelope amplitudes
//! * [`synthesis`]: shaped-noise resynthesis of band and broadband RIRs
//! * [`sim`]: statistical coupled-room simulator and closed-form envelopes
//! * [`metrics`]: envelope RMSE and C50
//! * [`cli`]: batch commands and on-disk formats (WAV, JSON, CSV)

pub mod cli;
pub mod decay;
mod error;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod signal;
pub mod sim;
pub mod slope_fit;
pub mod synthesis;

pub use decay::{
    build_kernels, cluster_decay_times, fit_edf_decays, BandKernels, CommonTimes, DecayEstimate,
    DecayKernelSet,
};
pub use error::{Error, Result};
pub use metrics::{c50, c50_error, envelope_rmse};
pub use signal::{
    octave_filterbank, power_scale, rms_envelope, schroeder_edf, BandedEnvelope, Edf, Rir,
    DEFAULT_BAND_CENTERS,
};
pub use sim::{analytic_envelope, chain_response, gen_room_response, RoomChain};
pub use slope_fit::{fit_dataset, fit_envelope, model_envelope, BandFit, Mode, SlopeFit};
pub use synthesis::{synth_band, synth_broadband};
