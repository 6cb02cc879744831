//! Phase reconstruction methods shared by `reconstruct` and `eval`.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use phaseforge::iterative::{self, IterConfig, PhaseInit};
use phaseforge::model::{PhaseChain, PhaseModel};
use phaseforge::spectral::{istft, read_pfspec, read_wav, stft, AnalysisConfig, Spectrum, Waveform};
use phaseforge::training::load_generator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gla,
    Raar,
    Prior,
    SpNspp,
    /// Prior followed by `k` refinement models.
    SpNsppIter(usize),
    /// Keeps the input's own phase.
    Natural,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gla" => Ok(Method::Gla),
            "raar" => Ok(Method::Raar),
            "prior" => Ok(Method::Prior),
            "sp-nspp" => Ok(Method::SpNspp),
            "natural" => Ok(Method::Natural),
            _ => s
                .strip_prefix("sp-nspp-iter-")
                .and_then(|k| k.parse().ok())
                .map(Method::SpNsppIter)
                .ok_or_else(|| {
                    format!("unknown method {s:?} (gla, raar, prior, sp-nspp, sp-nspp-iter-<k>, natural)")
                }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gla => f.write_str("gla"),
            Method::Raar => f.write_str("raar"),
            Method::Prior => f.write_str("prior"),
            Method::SpNspp => f.write_str("sp-nspp"),
            Method::SpNsppIter(k) => write!(f, "sp-nspp-iter-{k}"),
            Method::Natural => f.write_str("natural"),
        }
    }
}

impl Method {
    pub fn is_neural(self) -> bool {
        matches!(self, Method::Prior | Method::SpNspp | Method::SpNsppIter(_))
    }

    /// Refinement passes after the prior.
    fn refinements(self) -> usize {
        match self {
            Method::SpNspp => 1,
            Method::SpNsppIter(k) => k,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOptions {
    pub method: Method,
    pub iters: usize,
    pub beta: f64,
    pub random_init: bool,
    pub seed: u64,
    pub ckpt: Option<PathBuf>,
    pub refine_ckpts: Vec<PathBuf>,
    /// Analysis settings for WAV inputs to non-neural methods.
    pub analysis: AnalysisConfig,
}

/// A ready-to-run method: loaded networks plus the analysis they expect.
pub struct Runner {
    opts: MethodOptions,
    chain: Option<PhaseChain>,
    analysis: AnalysisConfig,
}

impl Runner {
    pub fn new(opts: MethodOptions) -> Result<Self> {
        if !opts.method.is_neural() {
            return Ok(Self {
                analysis: opts.analysis,
                opts,
                chain: None,
            });
        }
        let ckpt = opts
            .ckpt
            .as_ref()
            .with_context(|| format!("method {} needs --ckpt with a prior checkpoint", opts.method))?;
        let (prior, analysis) = load(ckpt)?;
        let mut chain = PhaseChain::new(prior)?;
        for path in &opts.refine_ckpts {
            let (m, a) = load(path)?;
            if a != analysis {
                bail!("{} was trained with different analysis settings than {}", path.display(), ckpt.display());
            }
            chain.push(m)?;
        }
        let k = opts.method.refinements();
        if k > chain.depth() {
            bail!(
                "method {} needs {k} refinement checkpoints (--refine-ckpt), got {}",
                opts.method,
                chain.depth()
            );
        }
        Ok(Self {
            opts,
            chain: Some(chain),
            analysis,
        })
    }

    pub fn analysis(&self) -> &AnalysisConfig {
        &self.analysis
    }

    /// Reads a WAV (by extension) or PFSPEC input as a spectrum.
    pub fn read_input(&self, path: &Path) -> Result<Spectrum> {
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        let spec = if is_wav {
            let w = read_wav(path)?;
            if w.sample_rate != self.analysis.sample_rate {
                bail!(
                    "{}: sample rate {} but analysis expects {}",
                    path.display(),
                    w.sample_rate,
                    self.analysis.sample_rate
                );
            }
            stft(&w, &self.analysis)?
        } else {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_pfspec(f).with_context(|| format!("reading {}", path.display()))?
        };
        if self.opts.method.is_neural() && spec.config != self.analysis {
            bail!(
                "{}: spectrum was analysed with {:?}, checkpoint expects {:?}",
                path.display(),
                spec.config,
                self.analysis
            );
        }
        Ok(spec)
    }

    /// Phase for the amplitude of `spec`, resynthesized to a waveform.
    pub fn run(&self, spec: &Spectrum) -> Result<Waveform> {
        let o = &self.opts;
        let init = if o.random_init { PhaseInit::Random(o.seed) } else { PhaseInit::Zero };
        let out = match (o.method, &self.chain) {
            (Method::Gla, _) => iterative::reconstruct(spec, &IterConfig::gla(o.iters).with_init(init))?.spectrum,
            (Method::Raar, _) => {
                iterative::reconstruct(spec, &IterConfig::raar(o.iters, o.beta).with_init(init))?.spectrum
            }
            (Method::Natural, _) => spec.clone(),
            (m, Some(chain)) => Spectrum {
                phase: chain.iterate(&spec.log_amp, m.refinements())?,
                ..spec.clone()
            },
            (m, None) => bail!("method {m} has no networks loaded"),
        };
        Ok(istft(&out)?)
    }
}

fn load(path: &Path) -> Result<(PhaseModel, AnalysisConfig)> {
    load_generator(path).with_context(|| format!("loading checkpoint {}", path.display()))
}
