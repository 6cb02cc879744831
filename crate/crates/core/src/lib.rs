//! Speech phase reconstruction from amplitude spectra.
//!
//! The crate covers three layers:
//!
//! * [`spectral`] and [`phase_ops`]: short-time Fourier analysis/synthesis and
//!   the phase difference algebra (anti-wrapping, shifts, time/frequency
//!   differences).
//! * [`iterative`]: Griffin-Lim and RAAR projection baselines.
//! * [`tensor`], [`model`], [`criteria`], [`training`]: a small reverse-mode
//!   autodiff engine and the two-stage neural phase predictor built on it,
//!   with its adversarial training losses and phase distortion metrics.
//!
//! [`corpus`] provides WAV ingestion and synthetic data for desk-scale runs.

pub mod corpus;
pub mod criteria;
mod error;
pub mod iterative;
pub mod kv;
pub mod model;
pub mod phase_ops;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Worker count requested through `PHASEFORGE_THREADS`, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("PHASEFORGE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
