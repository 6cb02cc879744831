//! Griffin-Lim and RAAR phase retrieval from a fixed linear amplitude.
//!
//! Both algorithms alternate two projections on complex spectrograms:
//!
//! * consistency, `P_C = STFT ∘ ISTFT`, taken in the padded signal domain so
//!   that it is the orthogonal projection onto spectrograms of some signal;
//! * amplitude, `P_A`, which replaces magnitudes with the target and keeps
//!   the argument (zero bins get phase 0).
//!
//! Residuals are measured in the two-sided spectrum norm (interior bins
//! counted twice), the norm in which `P_C` is orthogonal.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::spectral::{principal_arg, AnalysisConfig, Spectrum, StftEngine, AMP_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Gla,
    Raar,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseInit {
    Zero,
    Random(u64),
    Given(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub raar_beta: f64,
    pub init: PhaseInit,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gla,
            iterations: 100,
            raar_beta: 0.9,
            init: PhaseInit::Zero,
        }
    }
}

impl IterConfig {
    pub fn gla(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn raar(iterations: usize, beta: f64) -> Self {
        Self {
            algorithm: Algorithm::Raar,
            iterations,
            raar_beta: beta,
            ..Self::default()
        }
    }

    pub fn with_init(mut self, init: PhaseInit) -> Self {
        self.init = init;
        self
    }
}

/// Final spectrum plus the consistency residual `||P_C(c_k) - c_k||` before
/// each iteration `k` (and once more after the last one).
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub spectrum: Spectrum,
    pub residuals: Vec<f64>,
}

/// Holds the STFT plans used by repeated consistency projections.
#[derive(Debug, Clone)]
pub struct Projector {
    engine: StftEngine,
}

impl Projector {
    pub fn new(cfg: AnalysisConfig) -> Result<Self> {
        Ok(Self {
            engine: StftEngine::new(cfg)?,
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        self.engine.config()
    }

    pub fn project_consistency(&self, c: &Array2<Complex64>) -> Array2<Complex64> {
        let signal = self.engine.synthesize_padded(c.view());
        self.engine.analyze_padded(&signal, c.nrows())
    }
}

pub fn project_consistency(c: &Array2<Complex64>, cfg: &AnalysisConfig) -> Result<Array2<Complex64>> {
    if c.ncols() != cfg.bins() {
        return Err(Error::shape(format!(
            "{} bins, config expects {}",
            c.ncols(),
            cfg.bins()
        )));
    }
    Ok(Projector::new(*cfg)?.project_consistency(c))
}

pub fn project_amplitude(c: &Array2<Complex64>, target: &Array2<f64>) -> Result<Array2<Complex64>> {
    if c.dim() != target.dim() {
        return Err(Error::shape(format!(
            "spectrum {:?} vs amplitude {:?}",
            c.dim(),
            target.dim()
        )));
    }
    let mut out = Array2::zeros(c.raw_dim());
    Zip::from(&mut out)
        .and(c)
        .and(target)
        .for_each(|o, z, &a| *o = Complex64::from_polar(a, principal_arg(*z)));
    Ok(out)
}

/// Frobenius distance between two half spectra, measured on the full
/// Hermitian spectrum they stand for.
pub fn two_sided_distance(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let bins = a.ncols();
    let mut acc = 0.0;
    for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
        for (k, (x, y)) in ra.iter().zip(rb.iter()).enumerate() {
            let w = if k == 0 || k + 1 == bins { 1.0 } else { 2.0 };
            acc += w * (x - y).norm_sqr();
        }
    }
    acc.sqrt()
}

fn initial_phase(init: &PhaseInit, dim: (usize, usize)) -> Result<Array2<f64>> {
    match init {
        PhaseInit::Zero => Ok(Array2::zeros(dim)),
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(Array2::from_shape_simple_fn(dim, || {
                // (-pi, pi]
                PI - rng.random::<f64>() * 2.0 * PI
            }))
        }
        PhaseInit::Given(p) if p.dim() == dim => Ok(p.clone()),
        PhaseInit::Given(p) => Err(Error::shape(format!(
            "initial phase {:?} vs amplitude {:?}",
            p.dim(),
            dim
        ))),
    }
}

fn polar(amp: &Array2<f64>, phase: &Array2<f64>) -> Array2<Complex64> {
    let mut out = Array2::zeros(amp.raw_dim());
    Zip::from(&mut out)
        .and(amp)
        .and(phase)
        .for_each(|o, &a, &p| *o = Complex64::from_polar(a, p));
    out
}

fn finish(amp: &Array2<f64>, c: &Array2<Complex64>, cfg: &AnalysisConfig) -> Result<Spectrum> {
    Spectrum::new(
        amp.mapv(|a| a.max(AMP_FLOOR).ln()),
        c.mapv(principal_arg),
        *cfg,
    )
}

fn check_amplitude(amp: &Array2<f64>, cfg: &AnalysisConfig) -> Result<()> {
    if amp.ncols() != cfg.bins() {
        return Err(Error::shape(format!(
            "{} bins, config expects {}",
            amp.ncols(),
            cfg.bins()
        )));
    }
    if amp.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Contract("amplitudes must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Griffin-Lim: `c_{k+1} = P_A(P_C(c_k))`.
pub fn run_gla(amp: &Array2<f64>, cfg: &AnalysisConfig, it: &IterConfig) -> Result<Reconstruction> {
    check_amplitude(amp, cfg)?;
    let proj = Projector::new(*cfg)?;
    let mut c = polar(amp, &initial_phase(&it.init, amp.dim())?);
    let mut residuals = Vec::with_capacity(it.iterations + 1);
    for _ in 0..it.iterations {
        let pc = proj.project_consistency(&c);
        residuals.push(two_sided_distance(&pc, &c));
        c = project_amplitude(&pc, amp)?;
    }
    residuals.push(two_sided_distance(&proj.project_consistency(&c), &c));
    Ok(Reconstruction {
        spectrum: finish(amp, &c, cfg)?,
        residuals,
    })
}

/// One RAAR update:
/// `c' = (beta/2)(R_C R_A c + c) + (1 - beta) P_A c`, with `R = 2P - I`.
pub fn raar_step(proj: &Projector, c: &Array2<Complex64>, amp: &Array2<f64>, beta: f64) -> Result<Array2<Complex64>> {
    let pa = project_amplitude(c, amp)?;
    let ra = &pa * Complex64::new(2.0, 0.0) - c;
    let rc_ra = proj.project_consistency(&ra) * Complex64::new(2.0, 0.0) - &ra;
    Ok((rc_ra + c) * Complex64::new(0.5 * beta, 0.0) + pa * Complex64::new(1.0 - beta, 0.0))
}

/// Relaxed averaged alternating reflections, read out as `P_A(P_C(c_K))`.
pub fn run_raar(amp: &Array2<f64>, cfg: &AnalysisConfig, it: &IterConfig) -> Result<Reconstruction> {
    check_amplitude(amp, cfg)?;
    if !(it.raar_beta > 0.0 && it.raar_beta <= 1.0) {
        return Err(Error::config(format!("raar beta {} outside (0, 1]", it.raar_beta)));
    }
    let proj = Projector::new(*cfg)?;
    let mut c = polar(amp, &initial_phase(&it.init, amp.dim())?);
    let mut residuals = Vec::with_capacity(it.iterations + 1);
    for _ in 0..it.iterations {
        residuals.push(two_sided_distance(&proj.project_consistency(&c), &c));
        c = raar_step(&proj, &c, amp, it.raar_beta)?;
    }
    let out = project_amplitude(&proj.project_consistency(&c), amp)?;
    residuals.push(two_sided_distance(&proj.project_consistency(&out), &out));
    Ok(Reconstruction {
        spectrum: finish(amp, &out, cfg)?,
        residuals,
    })
}

pub fn run(amp: &Array2<f64>, cfg: &AnalysisConfig, it: &IterConfig) -> Result<Reconstruction> {
    match it.algorithm {
        Algorithm::Gla => run_gla(amp, cfg, it),
        Algorithm::Raar => run_raar(amp, cfg, it),
    }
}

/// Runs on the amplitude of `spec`, keeping its waveform length.
pub fn reconstruct(spec: &Spectrum, it: &IterConfig) -> Result<Reconstruction> {
    let mut r = run(&spec.amplitude(), &spec.config, it)?;
    r.spectrum.num_samples = spec.num_samples;
    Ok(r)
}
