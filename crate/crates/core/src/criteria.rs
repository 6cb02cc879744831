//! Training losses and evaluation metrics.
//!
//! Losses are recorded on a [`Tape`] so they can be differentiated; the
//! metrics work on plain arrays. Every phase comparison goes through the
//! anti-wrapping function, so adding whole turns to either argument never
//! changes a value.

use std::f64::consts::{LN_10, TAU};
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};

use crate::model::Psd;
use crate::phase_ops::{anti_wrap, PhaseDiff};
use crate::spectral::{stft, AnalysisConfig, Spectrum, Waveform, AMP_FLOOR};
use crate::tensor::{ShiftKind, Tape, Var};
use crate::{Error, Result};

/// `|x - 2*pi*round(x / 2*pi)|`; the rounding is treated as a constant, so
/// the gradient is the sign of the wrapped value.
pub fn anti_wrap_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let q = tape.scale(x, 1.0 / TAU);
    let r = tape.round_detached(q);
    let r = tape.scale(r, TAU);
    let d = tape.sub(x, r)?;
    Ok(tape.abs(d))
}

/// Tape version of [`PhaseDiff::apply`].
pub fn phase_diff_var(tape: &mut Tape, x: Var, kind: PhaseDiff) -> Result<Var> {
    let shifted = match kind {
        PhaseDiff::Ip => return Ok(x),
        PhaseDiff::Gd => tape.shift(x, ShiftKind::ColsRight)?,
        PhaseDiff::Iaf => tape.shift(x, ShiftKind::RowsDown)?,
        PhaseDiff::Tfidd => {
            let up = tape.shift(x, ShiftKind::RowsUp)?;
            tape.shift(up, ShiftKind::ColsLeft)?
        }
        PhaseDiff::Tfrdd => {
            let up = tape.shift(x, ShiftKind::RowsUp)?;
            tape.shift(up, ShiftKind::ColsRight)?
        }
    };
    tape.sub(x, shifted)
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return Err(Error::shape(format!(
            "phase shapes {:?} and {:?} must be equal 2D",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean anti-wrapped difference after the operator `kind`.
pub fn loss_diff(tape: &mut Tape, est: Var, target: Var, kind: PhaseDiff) -> Result<Var> {
    same_shape(tape, est, target)?;
    let de = phase_diff_var(tape, est, kind)?;
    let dt = phase_diff_var(tape, target, kind)?;
    let d = tape.sub(de, dt)?;
    let aw = anti_wrap_var(tape, d)?;
    Ok(tape.mean(aw))
}

pub fn loss_ip(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    loss_diff(tape, est, target, PhaseDiff::Ip)
}

pub fn loss_gd(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    loss_diff(tape, est, target, PhaseDiff::Gd)
}

pub fn loss_iaf(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    loss_diff(tape, est, target, PhaseDiff::Iaf)
}

/// IP + GD + IAF.
pub fn loss_phase(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    let ip = loss_ip(tape, est, target)?;
    let gd = loss_gd(tape, est, target)?;
    let iaf = loss_iaf(tape, est, target)?;
    let s = tape.add(ip, gd)?;
    tape.add(s, iaf)
}

/// In-direction plus reverse-direction diagonal difference losses.
pub fn loss_tfid(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    let a = loss_diff(tape, est, target, PhaseDiff::Tfidd)?;
    let b = loss_diff(tape, est, target, PhaseDiff::Tfrdd)?;
    tape.add(a, b)
}

/// `mean(max(0, 1 + sign * s))`
fn hinge(tape: &mut Tape, s: Var, sign: f64) -> Var {
    let m = tape.scale(s, sign);
    let m = tape.add_scalar(m, 1.0);
    let r = tape.relu(m);
    tape.mean(r)
}

/// Generator hinge loss `mean(max(0, 1 - s_fake))`.
pub fn loss_adv_g(tape: &mut Tape, fake: Var) -> Var {
    hinge(tape, fake, -1.0)
}

/// Discriminator hinge loss `mean(max(0, 1 - s_real)) + mean(max(0, 1 + s_fake))`.
pub fn loss_adv_d(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let a = hinge(tape, real, -1.0);
    let b = hinge(tape, fake, 1.0);
    tape.add(a, b)
}

/// Sum over layers of the mean squared feature difference.
pub fn loss_fm(tape: &mut Tape, fake: &[Var], real: &[Var]) -> Result<Var> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::shape(format!(
            "feature lists of length {} and {}",
            fake.len(),
            real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, &r) in fake.iter().zip(real) {
        if tape.shape(f) != tape.shape(r) {
            return Err(Error::shape(format!("features {:?} vs {:?}", tape.shape(f), tape.shape(r))));
        }
        let d = tape.sub(f, r)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_psd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 100.0,
            lambda_psd: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_psd >= 0.0) {
            return Err(Error::config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// The generator objective and its parts, all recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub loss_p: Var,
    pub loss_tfid: Option<Var>,
    pub adv_g: Option<Var>,
    pub fm: Option<Var>,
}

/// `lambda_p * L_P + lambda_psd * (L_adv_g + L_FM)`, plus `L_TFID` when
/// `with_tfid`. The discriminator is evaluated with frozen parameters; the
/// adversarial terms are skipped when `psd` is `None` or `lambda_psd` is 0.
pub fn generator_objective(
    tape: &mut Tape,
    est: Var,
    target: Var,
    psd: Option<&Psd>,
    weights: LossWeights,
    with_tfid: bool,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let loss_p = loss_phase(tape, est, target)?;
    let mut total = tape.scale(loss_p, weights.lambda_p);
    let (mut adv_g, mut fm) = (None, None);
    if let Some(psd) = psd.filter(|_| weights.lambda_psd > 0.0) {
        let fake = psd.forward(tape, false, est)?;
        let real = psd.forward(tape, false, target)?;
        let g = loss_adv_g(tape, fake.score);
        let f = loss_fm(tape, &fake.features, &real.features)?;
        let s = tape.add(g, f)?;
        let s = tape.scale(s, weights.lambda_psd);
        total = tape.add(total, s)?;
        adv_g = Some(g);
        fm = Some(f);
    }
    let mut tfid = None;
    if with_tfid {
        let t = loss_tfid(tape, est, target)?;
        total = tape.add(total, t)?;
        tfid = Some(t);
    }
    Ok(GeneratorLoss {
        total,
        loss_p,
        loss_tfid: tfid,
        adv_g,
        fm,
    })
}

fn check_dims(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// Phase distortion: mean over bins of the RMS over frames of the
/// anti-wrapped error after the operator `kind`.
pub fn pd_metric(est: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, kind: PhaseDiff) -> Result<f64> {
    check_dims(est, target)?;
    let (frames, bins) = est.dim();
    if frames == 0 || bins == 0 {
        return Err(Error::shape("empty phase matrix"));
    }
    let de = kind.apply(est);
    let dt = kind.apply(target);
    let mut sq = Array2::zeros((frames, bins));
    Zip::from(&mut sq).and(&dt).and(&de).for_each(|s, &t, &e| {
        let a = anti_wrap(t - e);
        *s = a * a;
    });
    let per_bin = sq.mean_axis(ndarray::Axis(0)).expect("frames > 0");
    Ok(per_bin.iter().map(|v| v.sqrt()).sum::<f64>() / bins as f64)
}

/// Average of the in-direction and reverse-direction diagonal distortions.
pub fn pd_tfid(est: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(0.5 * (pd_metric(est, target, PhaseDiff::Tfidd)? + pd_metric(est, target, PhaseDiff::Tfrdd)?))
}

pub const SNR_CLAMP_DB: f64 = 120.0;

/// SNR of `est` against `reference` over their common length, clamped to
/// +-120 dB.
pub fn snr_db(est: &[f64], reference: &[f64]) -> f64 {
    let n = est.len().min(reference.len());
    let sig: f64 = reference[..n].iter().map(|x| x * x).sum();
    let err: f64 = reference[..n].iter().zip(&est[..n]).map(|(x, y)| (x - y) * (x - y)).sum();
    let v = 10.0 * (sig / err).log10();
    if v.is_nan() {
        // 0/0: nothing to compare.
        SNR_CLAMP_DB
    } else {
        v.clamp(-SNR_CLAMP_DB, SNR_CLAMP_DB)
    }
}

/// Log-spectral distance in dB between two natural-log amplitude spectra,
/// each floored at the amplitude floor: mean over frames of the RMS over
/// bins.
pub fn lsd_db(est_log_amp: ArrayView2<'_, f64>, log_amp: ArrayView2<'_, f64>) -> Result<f64> {
    check_dims(est_log_amp, log_amp)?;
    let (frames, bins) = log_amp.dim();
    if frames == 0 || bins == 0 {
        return Err(Error::shape("empty amplitude matrix"));
    }
    let floor = AMP_FLOOR.ln();
    let to_db = 20.0 / LN_10;
    let total: f64 = est_log_amp
        .outer_iter()
        .zip(log_amp.outer_iter())
        .map(|(e, t)| {
            let ms = e
                .iter()
                .zip(t.iter())
                .map(|(&a, &b)| {
                    let d = to_db * (a.max(floor) - b.max(floor));
                    d * d
                })
                .sum::<f64>()
                / bins as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub pd_ip: f64,
    pub pd_gd: f64,
    pub pd_iaf: f64,
    pub pd_tfid: f64,
    pub snr_db: f64,
    pub lsd_db: f64,
}

impl MetricReport {
    /// Metrics from already computed spectra plus the two waveforms.
    pub fn from_parts(est: &Spectrum, reference: &Spectrum, est_wav: &[f64], ref_wav: &[f64]) -> Result<Self> {
        let (pe, pr) = (est.phase.view(), reference.phase.view());
        Ok(Self {
            pd_ip: pd_metric(pe, pr, PhaseDiff::Ip)?,
            pd_gd: pd_metric(pe, pr, PhaseDiff::Gd)?,
            pd_iaf: pd_metric(pe, pr, PhaseDiff::Iaf)?,
            pd_tfid: pd_tfid(pe, pr)?,
            snr_db: snr_db(est_wav, ref_wav),
            lsd_db: lsd_db(est.log_amp.view(), reference.log_amp.view())?,
        })
    }

    /// Re-analyses both waveforms (the estimate truncated or zero-padded to
    /// the reference length) and compares them.
    pub fn from_waveforms(est: &Waveform, reference: &Waveform, cfg: &AnalysisConfig) -> Result<Self> {
        if est.sample_rate != reference.sample_rate {
            return Err(Error::config(format!(
                "sample rates {} and {} differ",
                est.sample_rate, reference.sample_rate
            )));
        }
        let mut aligned = est.samples.clone();
        aligned.resize(reference.samples.len(), 0.0);
        let aligned = Waveform::new(aligned, est.sample_rate);
        let se = stft(&aligned, cfg)?;
        let sr = stft(reference, cfg)?;
        Self::from_parts(&se, &sr, &est.samples, &reference.samples)
    }

    /// Scores a predicted phase for the natural amplitude of `reference`:
    /// PD on the predicted phase itself, SNR on the resynthesized waveform
    /// and LSD on its re-analysis.
    pub fn from_prediction(reference: &Spectrum, phase: &Array2<f64>, ref_wav: &[f64]) -> Result<Self> {
        let est = Spectrum {
            phase: phase.clone(),
            ..reference.clone()
        };
        check_dims(phase.view(), reference.phase.view())?;
        let wav = crate::spectral::istft(&est)?;
        let reanalysed = stft(&wav, &reference.config)?;
        let (pe, pr) = (phase.view(), reference.phase.view());
        Ok(Self {
            pd_ip: pd_metric(pe, pr, PhaseDiff::Ip)?,
            pd_gd: pd_metric(pe, pr, PhaseDiff::Gd)?,
            pd_iaf: pd_metric(pe, pr, PhaseDiff::Iaf)?,
            pd_tfid: pd_tfid(pe, pr)?,
            snr_db: snr_db(&wav.samples, ref_wav),
            lsd_db: lsd_db(reanalysed.log_amp.view(), reference.log_amp.view())?,
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.pd_ip, self.pd_gd, self.pd_iaf, self.pd_tfid, self.snr_db, self.lsd_db]
    }

    /// Equal-weight mean over utterances.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<Self> {
        let mut acc = [0.0; 6];
        let mut n = 0usize;
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
            n += 1;
        }
        (n > 0).then(|| {
            let k = n as f64;
            Self {
                pd_ip: acc[0] / k,
                pd_gd: acc[1] / k,
                pd_iaf: acc[2] / k,
                pd_tfid: acc[3] / k,
                snr_db: acc[4] / k,
                lsd_db: acc[5] / k,
            }
        })
    }
}

pub const CSV_HEADER: &str = "utt,pd_ip,pd_gd,pd_iaf,pd_tfid,snr_db,lsd_db";

/// One utterance's metrics, or the reason they could not be computed.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub utt: String,
    pub result: std::result::Result<MetricReport, String>,
}

/// Writes the header, one row per utterance and a final `mean` row over the
/// successful ones. Failed rows carry `nan` in every metric column.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let fmt = |v: [f64; 6]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    for row in rows {
        match &row.result {
            Ok(r) => writeln!(w, "{},{}", row.utt, fmt(r.values()))?,
            Err(_) => writeln!(w, "{},nan,nan,nan,nan,nan,nan", row.utt)?,
        }
    }
    let ok: Vec<&MetricReport> = rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
    match MetricReport::mean(ok) {
        Some(m) => writeln!(w, "mean,{}", fmt(m.values()))?,
        None => writeln!(w, "mean,nan,nan,nan,nan,nan,nan")?,
    }
    Ok(())
}
