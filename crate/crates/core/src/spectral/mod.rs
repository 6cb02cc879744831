//! Short-time Fourier analysis and synthesis.
//!
//! Frames are centered: the signal is reflect-padded by `win_len / 2` on both
//! ends so frame `t` is centered on sample `t * hop_len`. The analysis and
//! synthesis windows are the same periodic Hann window and the overlap-add is
//! normalized by the summed squared window, which makes [`istft`] the
//! least-squares inverse of [`stft`].

mod pfspec;
mod wav;

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

pub use pfspec::{read_pfspec, write_pfspec};
pub use wav::{read_wav, write_wav};

/// Amplitudes are clamped to this value before taking the log.
pub const AMP_FLOOR: f64 = 1e-9;

/// Smallest summed squared window accepted by the overlap-add normalization.
const OLA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::config(format!("unknown window {other:?}"))),
        }
    }

    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl AnalysisConfig {
    /// 20 ms window, 5 ms shift, 1024-point FFT at 16 kHz (513 bins).
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            win_len: 320,
            hop_len: 80,
            fft_size: 1024,
            window: WindowKind::Hann,
        }
    }

    /// Small configuration for CPU-only experiments: 128-point FFT, 65 bins.
    pub fn desk() -> Self {
        Self {
            sample_rate: 16_000,
            win_len: 128,
            hop_len: 32,
            fft_size: 128,
            window: WindowKind::Hann,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::config(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop_len == 0 || self.hop_len > self.win_len || self.win_len > self.fft_size {
            return Err(Error::config(format!(
                "need 0 < hop ({}) <= win ({}) <= fft ({})",
                self.hop_len, self.win_len, self.fft_size
            )));
        }
        if self.win_len % 2 != 0 {
            return Err(Error::config("win_len must be even for centered framing"));
        }
        if self.win_len % self.hop_len != 0 || self.win_len / self.hop_len < 2 {
            return Err(Error::config(format!(
                "win_len / hop_len must be an integer >= 2 (got {} / {})",
                self.win_len, self.hop_len
            )));
        }
        Ok(())
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        1 + len / self.hop_len
    }

    fn pad(&self) -> usize {
        self.win_len / 2
    }
}

/// Paired log-amplitude and wrapped phase matrices, frames x bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub log_amp: Array2<f64>,
    pub phase: Array2<f64>,
    pub config: AnalysisConfig,
    /// Length of the waveform this spectrum describes.
    pub num_samples: usize,
}

impl Spectrum {
    pub fn new(log_amp: Array2<f64>, phase: Array2<f64>, config: AnalysisConfig) -> Result<Self> {
        if log_amp.dim() != phase.dim() {
            return Err(Error::shape(format!(
                "log_amp {:?} vs phase {:?}",
                log_amp.dim(),
                phase.dim()
            )));
        }
        if log_amp.ncols() != config.bins() {
            return Err(Error::shape(format!(
                "{} bins, config expects {}",
                log_amp.ncols(),
                config.bins()
            )));
        }
        let num_samples = log_amp.nrows().saturating_sub(1) * config.hop_len;
        Ok(Self {
            log_amp,
            phase,
            config,
            num_samples,
        })
    }

    pub fn frames(&self) -> usize {
        self.log_amp.nrows()
    }

    pub fn bins(&self) -> usize {
        self.log_amp.ncols()
    }

    /// Linear amplitude; entries at or below the floor map to exactly zero.
    pub fn amplitude(&self) -> Array2<f64> {
        self.log_amp.mapv(log_to_amp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn log_to_amp(l: f64) -> f64 {
    if l <= AMP_FLOOR.ln() {
        0.0
    } else {
        l.exp()
    }
}

/// Principal argument in (-pi, pi]; zero for a zero bin.
pub fn principal_arg(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let a = c.im.atan2(c.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Reusable STFT engine with cached FFT plans and window.
#[derive(Clone)]
pub struct StftEngine {
    cfg: AnalysisConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("cfg", &self.cfg).finish()
    }
}

impl StftEngine {
    pub fn new(cfg: AnalysisConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window.coefficients(cfg.win_len),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.cfg
    }

    /// Reflect-pads `x` by `win_len / 2` on both ends.
    pub fn pad(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() < self.cfg.win_len {
            return Err(Error::Length {
                len: x.len(),
                min: self.cfg.win_len,
            });
        }
        let p = self.cfg.pad();
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * p);
        out.extend((1..=p).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.extend((0..p).map(|i| x[n - 2 - i]));
        Ok(out)
    }

    /// Padded-domain length covered by `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.cfg.hop_len + self.cfg.win_len
    }

    /// Complex STFT of an already padded signal; frame `t` starts at `t * hop`.
    pub fn analyze_padded(&self, padded: &[f64], frames: usize) -> Array2<Complex64> {
        let (win, hop, nfft) = (self.cfg.win_len, self.cfg.hop_len, self.cfg.fft_size);
        let bins = self.cfg.bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < win {
                    Complex64::new(padded[start + i] * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.row_mut(t)
                .iter_mut()
                .zip(&buf[..bins])
                .for_each(|(o, b)| *o = *b);
        }
        out
    }

    /// Least-squares inverse of [`Self::analyze_padded`]: windowed overlap-add
    /// divided by the summed squared window, in the padded domain.
    pub fn synthesize_padded(&self, spec: ArrayView2<'_, Complex64>) -> Vec<f64> {
        let (win, hop, nfft) = (self.cfg.win_len, self.cfg.hop_len, self.cfg.fft_size);
        let bins = self.cfg.bins();
        let frames = spec.nrows();
        let len = self.padded_len(frames);
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / nfft as f64;
        for (t, row) in spec.outer_iter().enumerate() {
            buf[..bins].iter_mut().zip(row.iter()).for_each(|(b, c)| *b = *c);
            for k in bins..nfft {
                buf[k] = buf[nfft - k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for i in 0..win {
                let w = self.window[i];
                acc[start + i] += w * buf[i].re * scale;
                norm[start + i] += w * w;
            }
        }
        acc.iter_mut()
            .zip(&norm)
            .for_each(|(a, &n)| *a /= n.max(OLA_FLOOR));
        acc
    }

    /// Complex STFT with centered, reflect-padded framing.
    pub fn stft_complex(&self, x: &[f64]) -> Result<Array2<Complex64>> {
        let padded = self.pad(x)?;
        Ok(self.analyze_padded(&padded, self.cfg.num_frames(x.len())))
    }

    /// Inverse of [`Self::stft_complex`], cropped to `len` samples.
    pub fn istft_complex(&self, spec: ArrayView2<'_, Complex64>, len: usize) -> Result<Vec<f64>> {
        if spec.ncols() != self.cfg.bins() {
            return Err(Error::shape(format!(
                "{} bins, config expects {}",
                spec.ncols(),
                self.cfg.bins()
            )));
        }
        let padded = self.synthesize_padded(spec);
        let p = self.cfg.pad();
        if len + p > padded.len() {
            return Err(Error::shape(format!(
                "{} frames cannot cover {len} samples",
                spec.nrows()
            )));
        }
        Ok(padded[p..p + len].to_vec())
    }

    /// Checks that the summed squared window is nonzero everywhere it will be
    /// read back.
    pub fn check_cola(&self, frames: usize, len: usize) -> Result<()> {
        let (win, hop) = (self.cfg.win_len, self.cfg.hop_len);
        let mut norm = vec![0.0; self.padded_len(frames)];
        for t in 0..frames {
            for i in 0..win {
                norm[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        let p = self.cfg.pad();
        match norm[p..p + len].iter().position(|&n| n < OLA_FLOOR) {
            Some(i) => Err(Error::config(format!(
                "summed squared window vanishes at sample {i}"
            ))),
            None => Ok(()),
        }
    }

    pub fn stft(&self, x: &Waveform) -> Result<Spectrum> {
        let c = self.stft_complex(&x.samples)?;
        let mut s = spectrum_from(&c, self.cfg)?;
        s.num_samples = x.len();
        Ok(s)
    }

    pub fn istft(&self, s: &Spectrum) -> Result<Waveform> {
        check_shapes(s)?;
        self.check_cola(s.frames(), s.num_samples)?;
        let c = complex_from(s);
        let samples = self.istft_complex(c.view(), s.num_samples)?;
        Ok(Waveform::new(samples, self.cfg.sample_rate))
    }
}

fn check_shapes(s: &Spectrum) -> Result<()> {
    if s.log_amp.dim() != s.phase.dim() {
        return Err(Error::shape(format!(
            "log_amp {:?} vs phase {:?}",
            s.log_amp.dim(),
            s.phase.dim()
        )));
    }
    if s.bins() != s.config.bins() {
        return Err(Error::shape(format!(
            "{} bins, config expects {}",
            s.bins(),
            s.config.bins()
        )));
    }
    Ok(())
}

/// Forward STFT into a log-amplitude / phase pair.
pub fn stft(x: &Waveform, cfg: &AnalysisConfig) -> Result<Spectrum> {
    StftEngine::new(*cfg)?.stft(x)
}

/// Inverse STFT of a log-amplitude / phase pair.
pub fn istft(s: &Spectrum) -> Result<Waveform> {
    StftEngine::new(s.config)?.istft(s)
}

/// `exp(log_amp) * e^{i phase}`, with floored bins mapped to zero.
pub fn complex_from(s: &Spectrum) -> Array2<Complex64> {
    let mut out = Array2::zeros(s.log_amp.dim());
    Zip::from(&mut out)
        .and(&s.log_amp)
        .and(&s.phase)
        .for_each(|o, &l, &p| *o = Complex64::from_polar(log_to_amp(l), p));
    out
}

/// `(log max(|c|, floor), arg c)`; arg lies in (-pi, pi] and is 0 for zero bins.
pub fn spectrum_from(c: &Array2<Complex64>, cfg: AnalysisConfig) -> Result<Spectrum> {
    let log_amp = c.mapv(|z| z.norm().max(AMP_FLOOR).ln());
    let phase = c.mapv(principal_arg);
    Spectrum::new(log_amp, phase, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> AnalysisConfig {
        AnalysisConfig {
            sample_rate: 8000,
            win_len: 32,
            hop_len: 8,
            fft_size: 32,
            window: WindowKind::Hann,
        }
    }

    fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000)
    }

    #[test]
    fn default_configs_are_valid() {
        AnalysisConfig::paper().validate().unwrap();
        AnalysisConfig::desk().validate().unwrap();
        assert_eq!(AnalysisConfig::paper().bins(), 513);
        assert_eq!(AnalysisConfig::desk().bins(), 65);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_cfg();
        c.fft_size = 48;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.hop_len = 32;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.hop_len = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_signal_is_a_length_error() {
        let x = Waveform::new(vec![0.0; 31], 8000);
        assert!(matches!(
            stft(&x, &small_cfg()),
            Err(Error::Length { len: 31, min: 32 })
        ));
    }

    #[test]
    fn frame_count_follows_centered_framing() {
        let cfg = small_cfg();
        let x = Waveform::new(vec![0.1; 100], 8000);
        let s = stft(&x, &cfg).unwrap();
        // padded length 132, (132 - 32) / 8 + 1 = 13
        assert_eq!(s.frames(), 13);
        assert_eq!(s.bins(), 17);
    }

    #[test]
    fn dc_has_zero_phase_at_bin_zero() {
        let s = stft(&Waveform::new(vec![1.0; 200], 8000), &small_cfg()).unwrap();
        assert!(s.phase.column(0).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn silence_is_floor_and_zero_phase() {
        let s = stft(&Waveform::new(vec![0.0; 128], 8000), &small_cfg()).unwrap();
        assert!(s.log_amp.iter().all(|&l| l == AMP_FLOOR.ln()));
        assert!(s.phase.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn cosine_on_bin_has_zero_phase() {
        // Frame t starts at sample t*hop - win/2. A cosine at bin k whose
        // period divides the hop is zero-phase at every frame start.
        let cfg = small_cfg();
        let k = 4; // period 8 samples = hop
        let n = cfg.fft_size as f64;
        let x: Vec<f64> = (0..256)
            .map(|i| (2.0 * PI * k as f64 * (i as f64 - 16.0) / n).cos())
            .collect();
        let s = stft(&Waveform::new(x.clone(), 8000), &cfg).unwrap();

        // brute-force DFT of interior frames
        let w = cfg.window.coefficients(cfg.win_len);
        for t in 2..s.frames() - 2 {
            let start = t * cfg.hop_len - cfg.win_len / 2;
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..cfg.win_len {
                let ang = -2.0 * PI * k as f64 * m as f64 / n;
                re += w[m] * x[start + m] * ang.cos();
                im += w[m] * x[start + m] * ang.sin();
            }
            let oracle = im.atan2(re);
            assert!(oracle.abs() < 1e-9);
            assert!(s.phase[[t, k]].abs() < 1e-6, "frame {t}: {}", s.phase[[t, k]]);
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        for len in [32, 33, 64, 101, 257] {
            let x = random_wave(&mut rng, len);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), len);
            let err = x
                .samples
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "len {len}: {err}");
        }
    }

    #[test]
    fn zero_amplitude_gives_silence() {
        let cfg = small_cfg();
        let mut s = stft(&Waveform::new(vec![0.3; 96], 8000), &cfg).unwrap();
        s.log_amp.fill(f64::NEG_INFINITY);
        assert!(istft(&s).unwrap().samples.iter().all(|&v| v == 0.0));
        s.log_amp.fill(AMP_FLOOR.ln());
        assert!(istft(&s).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_phase_spectrum_is_inconsistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let mut s = stft(&random_wave(&mut rng, 128), &cfg).unwrap();
        s.phase.mapv_inplace(|_| rng.random_range(-PI..PI));
        let again = stft(&istft(&s).unwrap(), &cfg).unwrap();
        let diff = (&again.log_amp - &s.log_amp).mapv(f64::abs).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn complex_conversion_conventions() {
        let cfg = small_cfg();
        let mut c = Array2::zeros((1, cfg.bins()));
        c[[0, 0]] = Complex64::new(1.0, 0.0);
        c[[0, 1]] = Complex64::new(-1.0, 0.0);
        c[[0, 2]] = Complex64::new(-1.0, -0.0);
        let s = spectrum_from(&c, cfg).unwrap();
        assert_eq!(s.log_amp[[0, 0]], 0.0);
        assert_eq!(s.phase[[0, 0]], 0.0);
        assert_eq!(s.phase[[0, 1]], PI);
        assert_eq!(s.phase[[0, 2]], PI);
        assert_eq!(s.log_amp[[0, 3]], AMP_FLOOR.ln());
        assert_eq!(s.phase[[0, 3]], 0.0);
        let back = complex_from(&s);
        assert!((back[[0, 1]] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
        assert_eq!(back[[0, 3]], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn amplitude_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let x = random_wave(&mut rng, 150);
        let y = Waveform::new(x.samples.iter().map(|v| 2.5 * v).collect(), 8000);
        let (sx, sy) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap());
        let (ax, ay) = (sx.amplitude(), sy.amplitude());
        for ((a, b), (p, q)) in ax.iter().zip(&ay).zip(sx.phase.iter().zip(&sy.phase)) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            if *a > AMP_FLOOR {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
