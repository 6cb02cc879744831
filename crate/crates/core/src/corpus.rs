//! WAV directory ingestion and seeded synthetic corpora.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spectral::{read_wav, write_wav, Waveform};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<(String, Waveform)>,
    pub split: Split,
}

impl Corpus {
    /// Checks id uniqueness and a common sample rate.
    pub fn new(entries: Vec<(String, Waveform)>, split: Split) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::config(format!("duplicate utterance id {id}")));
            }
        }
        if let Some((_, first)) = entries.first() {
            if let Some((id, w)) = entries.iter().find(|(_, w)| w.sample_rate != first.sample_rate) {
                return Err(Error::config(format!(
                    "{id} has sample rate {}, expected {}",
                    w.sample_rate, first.sample_rate
                )));
            }
        }
        Ok(Self { entries, split })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_rate(&self) -> Option<u32> {
        self.entries.first().map(|(_, w)| w.sample_rate)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Waveform> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, w)| w)
    }

    /// Deterministic split by position: the last `n_test` entries go to test,
    /// the `n_valid` before them to valid, the rest to train.
    pub fn split(self, n_valid: usize, n_test: usize) -> Result<[Corpus; 3]> {
        if n_valid + n_test > self.entries.len() {
            return Err(Error::config(format!(
                "cannot hold out {} of {} utterances",
                n_valid + n_test,
                self.entries.len()
            )));
        }
        let mut entries = self.entries;
        let test = entries.split_off(entries.len() - n_test);
        let valid = entries.split_off(entries.len() - n_valid);
        Ok([
            Corpus::new(entries, Split::Train)?,
            Corpus::new(valid, Split::Valid)?,
            Corpus::new(test, Split::Test)?,
        ])
    }

    /// Writes `<id>.wav` for every entry.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (id, w) in &self.entries {
            write_wav(&dir.join(format!("{id}.wav")), w)?;
        }
        Ok(())
    }

    /// Newline-separated id list.
    pub fn manifest(&self) -> String {
        self.ids().map(|id| format!("{id}\n")).collect()
    }
}

/// Reads every `.wav` file in `dir` (not recursive) in lexicographic file
/// name order; the id is the file stem.
pub fn load_dir(dir: &Path, split: Split) -> Result<Corpus> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            paths.push(path);
        }
    }
    paths.sort();
    let entries = paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            read_wav(p).map(|w| (id, w))
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(entries, split)
}

/// Loads the ids listed in a manifest from `dir`, in manifest order.
pub fn load_manifest(dir: &Path, manifest: &Path, split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(manifest)?;
    let entries = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| read_wav(&dir.join(format!("{id}.wav"))).map(|w| (id.to_string(), w)))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(entries, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Stationary harmonic tone.
    Harmonic,
    /// Harmonic tone whose f0 glides linearly.
    Chirp,
    /// Harmonic tone in noise at -10 dB.
    NoiseMix,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmonic" => Ok(Self::Harmonic),
            "chirp" => Ok(Self::Chirp),
            "noise_mix" => Ok(Self::NoiseMix),
            _ => Err(Error::config(format!("unknown synthetic kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_utts: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub kind: SynthKind,
    pub sample_rate: u32,
}

impl SynthSpec {
    pub fn harmonic(n_utts: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            n_utts,
            duration_s,
            seed,
            kind: SynthKind::Harmonic,
            sample_rate: 16000,
        }
    }
}

pub const PEAK: f64 = 0.95;

/// Generates `n_utts` utterances `syn_00000`, `syn_00001`, ... Each is a sum
/// of 3 to 8 cosine harmonics of a random f0 in [80, 400] Hz with random
/// amplitudes, plus white noise (-30 dB relative to the tone, -10 dB for
/// `NoiseMix`), peak normalized to 0.95. All harmonics start in phase, which
/// gives each period a pulse-like shape.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    if !(spec.duration_s > 0.0) || spec.sample_rate == 0 {
        return Err(Error::config("duration and sample rate must be positive"));
    }
    let len = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entries = (0..spec.n_utts)
        .map(|i| {
            let w = synth_one(&mut rng, spec, len);
            (format!("syn_{i:05}"), w)
        })
        .collect();
    Corpus::new(entries, Split::Train)
}

fn synth_one(rng: &mut ChaCha8Rng, spec: &SynthSpec, len: usize) -> Waveform {
    let sr = spec.sample_rate as f64;
    let n_harm = rng.random_range(3..=8usize);
    let f0_start = rng.random_range(80.0..=400.0);
    let f0_end = match spec.kind {
        SynthKind::Chirp => rng.random_range(80.0..=400.0),
        _ => f0_start,
    };
    let amps: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.1..=1.0)).collect();
    let duration = len as f64 / sr;

    let mut x = vec![0.0; len];
    for (t, v) in x.iter_mut().enumerate() {
        let time = t as f64 / sr;
        // Integrated instantaneous f0 of a linear glide.
        let cycles = f0_start * time + 0.5 * (f0_end - f0_start) / duration * time * time;
        let f0_now = f0_start + (f0_end - f0_start) * time / duration;
        *v = amps
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k + 1) as f64 * f0_now < 0.5 * sr)
            .map(|(k, a)| a * (TAU * (k + 1) as f64 * cycles).cos())
            .sum();
    }

    let power = x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
    let snr_db = match spec.kind {
        SynthKind::NoiseMix => 10.0,
        _ => 30.0,
    };
    let sigma = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
    for v in &mut x {
        let n: f64 = StandardNormal.sample(rng);
        *v += sigma * n;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(x, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let s = SynthSpec::harmonic(3, 0.1, 42);
        assert_eq!(gen_synthetic(&s).unwrap(), gen_synthetic(&s).unwrap());
        let other = SynthSpec { seed: 43, ..s };
        assert_ne!(gen_synthetic(&s).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn empty_and_normalized() {
        assert!(gen_synthetic(&SynthSpec::harmonic(0, 0.1, 0)).unwrap().is_empty());
        for kind in [SynthKind::Harmonic, SynthKind::Chirp, SynthKind::NoiseMix] {
            let c = gen_synthetic(&SynthSpec {
                kind,
                ..SynthSpec::harmonic(4, 0.2, 1)
            })
            .unwrap();
            for (_, w) in &c.entries {
                assert_eq!(w.len(), 3200);
                let peak = w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!((peak - PEAK).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let c = gen_synthetic(&SynthSpec::harmonic(10, 0.05, 0)).unwrap();
        let [tr, va, te] = c.split(2, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5, 2, 3));
        let all: BTreeSet<&str> = tr.ids().chain(va.ids()).chain(te.ids()).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(te.split, Split::Test);
        assert_eq!(te.manifest().lines().count(), 3);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let w = Waveform::new(vec![0.0; 4], 16000);
        assert!(Corpus::new(vec![("a".into(), w.clone()), ("a".into(), w)], Split::Train).is_err());
    }
}
