//! Stage-wise adversarial training of the prior and refinement models.
//!
//! Each step samples one segment per batch item, runs the generator once,
//! updates the discriminator on the detached prediction, and then updates the
//! generator against the freshly updated (frozen) discriminator. Batch items
//! run on their own tapes in parallel; gradients are reduced in item order,
//! so results do not depend on the worker count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::criteria::{generator_objective, loss_adv_d, loss_tfid, LossWeights};
use crate::kv::KeyValues;
use crate::model::{BackboneConfig, PhaseModel, Psd, PsdConfig};
use crate::spectral::{AnalysisConfig, StftEngine, Waveform};
use crate::tensor::checkpoint::{self, load_store, store_entries};
use crate::tensor::optim::{adamw_step, AdamState, AdamWConfig};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prior,
    Refine,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Stage::Prior),
            "refine" => Ok(Stage::Refine),
            _ => Err(Error::config(format!("unknown stage {s:?} (prior|refine)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prior => "prior",
            Stage::Refine => "refine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Adds the diagonal difference loss in the refinement stage. Turning it
    /// off is only meant for ablations.
    pub tfid: bool,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub analysis: AnalysisConfig,
    pub backbone: BackboneConfig,
    pub psd: PsdConfig,
    /// Moment and decay settings; the learning rate comes from the schedule.
    pub adam: AdamWConfig,
}

impl TrainConfig {
    /// 3100 epochs, batch 16, 8000-sample segments, lr 2e-4 decaying by
    /// 0.999 per epoch, full-size networks.
    pub fn paper(stage: Stage) -> Self {
        let analysis = AnalysisConfig::paper();
        Self {
            stage,
            epochs: 3100,
            batch_size: 16,
            segment_samples: 8000,
            lr0: 2e-4,
            lr_decay: 0.999,
            seed: 0,
            weights: LossWeights::default(),
            tfid: true,
            checkpoint_every: 100,
            analysis,
            backbone: BackboneConfig::paper(analysis.bins(), stage == Stage::Refine),
            psd: PsdConfig::paper(),
            adam: AdamWConfig::default(),
        }
    }

    /// 200 epochs, batch 4, 2048-sample segments, 128-point FFT and small
    /// networks.
    pub fn desk(stage: Stage) -> Self {
        let analysis = AnalysisConfig::desk();
        Self {
            epochs: 200,
            batch_size: 4,
            segment_samples: 2048,
            lr0: 1e-3,
            checkpoint_every: 50,
            analysis,
            backbone: BackboneConfig::desk(analysis.bins(), stage == Stage::Refine),
            psd: PsdConfig::desk(),
            ..Self::paper(stage)
        }
    }

    pub fn with_tfid(&self) -> bool {
        self.stage == Stage::Refine && self.tfid
    }

    pub fn validate(&self) -> Result<()> {
        self.analysis.validate()?;
        self.backbone.validate()?;
        self.weights.validate()?;
        if self.segment_samples < self.analysis.win_len {
            return Err(Error::config(format!(
                "segment_samples {} shorter than win_len {}",
                self.segment_samples, self.analysis.win_len
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay {} not in (0, 1]", self.lr_decay)));
        }
        if !(self.lr0 > 0.0) || self.batch_size == 0 {
            return Err(Error::config("lr0 and batch_size must be positive"));
        }
        if self.backbone.bins != self.analysis.bins() {
            return Err(Error::config(format!(
                "model has {} bins, analysis gives {}",
                self.backbone.bins,
                self.analysis.bins()
            )));
        }
        if self.backbone.conditioned != (self.stage == Stage::Refine) {
            return Err(Error::config("only refinement models are conditioned"));
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("stage", self.stage);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("segment_samples", self.segment_samples);
        kv.set("lr0", self.lr0);
        kv.set("lr_decay", self.lr_decay);
        kv.set("seed", self.seed);
        kv.set("lambda_p", self.weights.lambda_p);
        kv.set("lambda_psd", self.weights.lambda_psd);
        kv.set("tfid", self.tfid);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("sample_rate", self.analysis.sample_rate);
        kv.set("win_len", self.analysis.win_len);
        kv.set("hop_len", self.analysis.hop_len);
        kv.set("fft_size", self.analysis.fft_size);
        kv.set("n_blocks", self.backbone.n_blocks);
        kv.set("channels", self.backbone.channels);
        kv.set("block_hidden", self.backbone.block_hidden);
        kv.set("kernel", self.backbone.kernel);
        kv.set("psd_channels", self.psd.channels);
        kv.set("psd_slope", self.psd.slope);
        kv.set("adam_beta1", self.adam.beta1);
        kv.set("adam_beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("weight_decay", self.adam.weight_decay);
        kv
    }

    /// Reads a config; missing keys take the desk defaults for the stage
    /// named by `stage_override` or the file's `stage` key (default prior).
    pub fn from_kv(kv: &KeyValues, stage_override: Option<Stage>) -> Result<Self> {
        let stage = match stage_override {
            Some(s) => s,
            None => kv.get_or("stage", Stage::Prior)?,
        };
        let d = Self::desk(stage);
        let analysis = AnalysisConfig {
            sample_rate: kv.get_or("sample_rate", d.analysis.sample_rate)?,
            win_len: kv.get_or("win_len", d.analysis.win_len)?,
            hop_len: kv.get_or("hop_len", d.analysis.hop_len)?,
            fft_size: kv.get_or("fft_size", d.analysis.fft_size)?,
            window: d.analysis.window,
        };
        analysis.validate()?;
        let backbone = BackboneConfig {
            n_blocks: kv.get_or("n_blocks", d.backbone.n_blocks)?,
            channels: kv.get_or("channels", d.backbone.channels)?,
            block_hidden: kv.get_or("block_hidden", d.backbone.block_hidden)?,
            kernel: kv.get_or("kernel", d.backbone.kernel)?,
            bins: analysis.bins(),
            conditioned: stage == Stage::Refine,
        };
        let cfg = Self {
            stage,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            segment_samples: kv.get_or("segment_samples", d.segment_samples)?,
            lr0: kv.get_or("lr0", d.lr0)?,
            lr_decay: kv.get_or("lr_decay", d.lr_decay)?,
            seed: kv.get_or("seed", d.seed)?,
            weights: LossWeights {
                lambda_p: kv.get_or("lambda_p", d.weights.lambda_p)?,
                lambda_psd: kv.get_or("lambda_psd", d.weights.lambda_psd)?,
            },
            tfid: kv.get_or("tfid", d.tfid)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            analysis,
            backbone,
            psd: PsdConfig {
                channels: kv.get_or("psd_channels", d.psd.channels)?,
                slope: kv.get_or("psd_slope", d.psd.slope)?,
            },
            adam: AdamWConfig {
                beta1: kv.get_or("adam_beta1", d.adam.beta1)?,
                beta2: kv.get_or("adam_beta2", d.adam.beta2)?,
                eps: kv.get_or("adam_eps", d.adam.eps)?,
                weight_decay: kv.get_or("weight_decay", d.adam.weight_decay)?,
                lr: d.adam.lr,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const LOG_HEADER: &str = "epoch,lr,loss_p,loss_tfid,loss_adv_g,loss_fm,loss_adv_d";

/// Mean losses over the steps of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub loss_p: f64,
    pub loss_tfid: f64,
    pub loss_adv_g: f64,
    pub loss_fm: f64,
    pub loss_adv_d: f64,
}

impl EpochLog {
    fn to_row(self) -> [f64; 7] {
        [
            self.epoch as f64,
            self.lr,
            self.loss_p,
            self.loss_tfid,
            self.loss_adv_g,
            self.loss_fm,
            self.loss_adv_d,
        ]
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            lr: r[1],
            loss_p: r[2],
            loss_tfid: r[3],
            loss_adv_g: r[4],
            loss_fm: r[5],
            loss_adv_d: r[6],
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.lr, self.loss_p, self.loss_tfid, self.loss_adv_g, self.loss_fm, self.loss_adv_d
        )
    }
}

/// Everything needed to continue training exactly where it stopped. The
/// sampling RNG is re-derived from the seed and the epoch counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub gen: PhaseModel,
    pub gen_adam: AdamState,
    pub psd: Psd,
    pub psd_adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

struct Item {
    log_amp: Array2<f64>,
    phase: Array2<f64>,
    prior: Option<Array2<f64>>,
}

struct GenTape {
    tape: Tape,
    est: Var,
    target: Var,
}

#[derive(Default, Clone, Copy)]
struct StepLosses {
    loss_p: f64,
    loss_tfid: f64,
    adv_g: f64,
    fm: f64,
    adv_d: f64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = PhaseModel::new(cfg.backbone, rng.random())?;
        let psd = Psd::new(cfg.psd, rng.random())?;
        Ok(Self {
            cfg,
            gen_adam: AdamState::new(gen.params()),
            psd_adam: AdamState::new(psd.params()),
            gen,
            psd,
            epoch: 0,
            log: Vec::new(),
        })
    }

    fn check_prior(&self, prior: Option<&PhaseModel>) -> Result<()> {
        match (self.cfg.stage, prior) {
            (Stage::Prior, None) => Ok(()),
            (Stage::Prior, Some(_)) => Err(Error::Contract("the prior stage takes no frozen prior".into())),
            (Stage::Refine, None) => Err(Error::MissingPrior),
            (Stage::Refine, Some(p)) => {
                if p.config().conditioned || p.config().bins != self.cfg.backbone.bins {
                    return Err(Error::Contract(format!(
                        "frozen prior must be unconditioned with {} bins",
                        self.cfg.backbone.bins
                    )));
                }
                Ok(())
            }
        }
    }

    /// Sampling RNG for epoch `epoch` (0-based).
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Trains until `target_epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run<F>(&mut self, corpus: &Corpus, prior: Option<&PhaseModel>, target_epochs: usize, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&TrainState) -> Result<()>,
    {
        self.check_prior(prior)?;
        if corpus.is_empty() {
            return Err(Error::config("training corpus is empty"));
        }
        if let Some(sr) = corpus.sample_rate().filter(|&sr| sr != self.cfg.analysis.sample_rate) {
            return Err(Error::config(format!(
                "corpus sample rate {sr} differs from analysis rate {}",
                self.cfg.analysis.sample_rate
            )));
        }
        let engine = StftEngine::new(self.cfg.analysis)?;
        while self.epoch < target_epochs {
            let log = self.train_epoch(&engine, corpus, prior)?;
            self.log.push(log);
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(())
    }

    fn train_epoch(&mut self, engine: &StftEngine, corpus: &Corpus, prior: Option<&PhaseModel>) -> Result<EpochLog> {
        let e = self.epoch;
        let lr = self.cfg.lr_at(e);
        let mut rng = self.epoch_rng(e);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let seg = self.cfg.segment_samples;
        let mut sum = StepLosses::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let picks: Vec<(usize, usize)> = chunk
                .iter()
                .map(|&u| {
                    let len = corpus.entries[u].1.len();
                    let off = if len > seg { rng.random_range(0..=len - seg) } else { 0 };
                    (u, off)
                })
                .collect();
            let l = self.train_step(engine, corpus, prior, &picks, lr).map_err(|err| match err {
                Error::NonFinite { detail, .. } => {
                    let ids: Vec<String> = picks
                        .iter()
                        .map(|&(u, off)| format!("{}@{off}", corpus.entries[u].0))
                        .collect();
                    Error::NonFinite {
                        epoch: e + 1,
                        step,
                        detail: format!("{detail}; lr {lr:e}; batch [{}]", ids.join(", ")),
                    }
                }
                other => other,
            })?;
            sum.loss_p += l.loss_p;
            sum.loss_tfid += l.loss_tfid;
            sum.adv_g += l.adv_g;
            sum.fm += l.fm;
            sum.adv_d += l.adv_d;
            steps += 1;
        }
        let k = steps as f64;
        Ok(EpochLog {
            epoch: e + 1,
            lr,
            loss_p: sum.loss_p / k,
            loss_tfid: sum.loss_tfid / k,
            loss_adv_g: sum.adv_g / k,
            loss_fm: sum.fm / k,
            loss_adv_d: sum.adv_d / k,
        })
    }

    fn train_step(
        &mut self,
        engine: &StftEngine,
        corpus: &Corpus,
        prior: Option<&PhaseModel>,
        picks: &[(usize, usize)],
        lr: f64,
    ) -> Result<StepLosses> {
        let seg = self.cfg.segment_samples;
        let scale = 1.0 / picks.len() as f64;
        let items: Vec<Item> = picks
            .par_iter()
            .map(|&(u, off)| {
                let w = &corpus.entries[u].1;
                let end = (off + seg).min(w.len());
                let mut samples = w.samples[off..end].to_vec();
                samples.resize(seg, 0.0);
                let spec = engine.stft(&Waveform::new(samples, w.sample_rate))?;
                let prior = prior.map(|p| p.predict(&spec.log_amp, None)).transpose()?;
                Ok(Item {
                    log_amp: spec.log_amp,
                    phase: spec.phase,
                    prior,
                })
            })
            .collect::<Result<_>>()?;

        // One generator pass per item; the tape is reused for the G step.
        let gen = &self.gen;
        let tapes: Vec<GenTape> = items
            .par_iter()
            .map(|it| {
                let mut tape = Tape::new();
                let a = tape.constant(Tensor::from_array2(&it.log_amp));
                let target = tape.constant(Tensor::from_array2(&it.phase));
                let pr = it.prior.as_ref().map(|p| tape.constant(Tensor::from_array2(p)));
                let est = gen.forward(&mut tape, true, a, pr)?;
                Ok(GenTape { tape, est, target })
            })
            .collect::<Result<_>>()?;

        // Discriminator step on the detached predictions.
        let psd = &self.psd;
        let d_out: Vec<(f64, Gradients)> = tapes
            .par_iter()
            .map(|g| {
                let mut t = Tape::new();
                let fake = t.constant(g.tape.value(g.est).clone());
                let real = t.constant(g.tape.value(g.target).clone());
                let sf = psd.forward(&mut t, true, fake)?;
                let sr = psd.forward(&mut t, true, real)?;
                let l = loss_adv_d(&mut t, sr.score, sf.score)?;
                let v = t.value(l).item()?;
                Ok((v, t.backward(l)?))
            })
            .collect::<Result<_>>()?;
        let adv_d = d_out.iter().map(|(v, _)| v).sum::<f64>() * scale;
        if !adv_d.is_finite() {
            return Err(non_finite(format!("discriminator loss {adv_d}")));
        }
        let store = self.psd.params_mut();
        store.zero_grad();
        for (_, g) in &d_out {
            store.accumulate(g, scale);
        }
        drop(d_out);
        let adam = AdamWConfig { lr, ..self.cfg.adam };
        adamw_step(self.psd.params_mut(), &mut self.psd_adam, &adam)?;

        // Generator step against the updated, frozen discriminator.
        let psd = &self.psd;
        let weights = self.cfg.weights;
        let with_tfid = self.cfg.with_tfid();
        let g_out: Vec<(StepLosses, Gradients)> = tapes
            .into_par_iter()
            .map(|mut g| {
                let obj = generator_objective(&mut g.tape, g.est, g.target, Some(psd), weights, with_tfid)?;
                let val = |v: Option<Var>, t: &Tape| v.map(|v| t.value(v).item()).transpose();
                let tfid = match val(obj.loss_tfid, &g.tape)? {
                    Some(v) => v,
                    None => {
                        let mut side = Tape::new();
                        let e = side.constant(g.tape.value(g.est).clone());
                        let p = side.constant(g.tape.value(g.target).clone());
                        let l = loss_tfid(&mut side, e, p)?;
                        side.value(l).item()?
                    }
                };
                let losses = StepLosses {
                    loss_p: g.tape.value(obj.loss_p).item()?,
                    loss_tfid: tfid,
                    adv_g: val(obj.adv_g, &g.tape)?.unwrap_or(0.0),
                    fm: val(obj.fm, &g.tape)?.unwrap_or(0.0),
                    adv_d: 0.0,
                };
                let total = g.tape.value(obj.total).item()?;
                if !total.is_finite() {
                    return Err(non_finite(format!(
                        "generator objective {total} (L_P {}, TFID {}, adv {}, FM {})",
                        losses.loss_p, losses.loss_tfid, losses.adv_g, losses.fm
                    )));
                }
                Ok((losses, g.tape.backward(obj.total)?))
            })
            .collect::<Result<_>>()?;
        let store = self.gen.params_mut();
        store.zero_grad();
        let mut out = StepLosses {
            adv_d,
            ..StepLosses::default()
        };
        for (l, g) in &g_out {
            store.accumulate(g, scale);
            out.loss_p += l.loss_p * scale;
            out.loss_tfid += l.loss_tfid * scale;
            out.adv_g += l.adv_g * scale;
            out.fm += l.fm * scale;
        }
        drop(g_out);
        adamw_step(self.gen.params_mut(), &mut self.gen_adam, &adam)?;
        Ok(out)
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = store_entries("gen.", self.gen.params(), Some(&self.gen_adam));
        entries.extend(store_entries("psd.", self.psd.params(), Some(&self.psd_adam)));
        let meta = meta_tensors(&self.cfg.analysis, self.gen.config());
        let rows: Vec<f64> = self.log.iter().flat_map(|l| l.to_row()).collect();
        let state = [
            ("state.epoch".to_string(), Tensor::scalar(self.epoch as f64)),
            ("state.gen_step".to_string(), Tensor::scalar(self.gen_adam.step as f64)),
            ("state.psd_step".to_string(), Tensor::scalar(self.psd_adam.step as f64)),
            ("state.log".to_string(), Tensor::new(&[self.log.len(), 7], rows)?),
        ];
        entries.extend(meta.iter().map(|(n, t)| (n.clone(), t)));
        entries.extend(state.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::write_file(path, &entries)
    }

    /// Rebuilds the state saved by [`TrainState::checkpoint`]. Nothing is
    /// modified unless the whole file is valid for `cfg`.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let entries = checkpoint::read_file(path)?;
        let mut st = Self::new(cfg)?;
        let (analysis, backbone) = read_meta(&entries)?;
        if analysis != cfg.analysis || backbone != cfg.backbone {
            return Err(Error::config(format!("checkpoint {} was written for a different configuration", path.display())));
        }
        let scalar = |name: &str| -> Result<f64> {
            checkpoint::find(&entries, name)
                .ok_or_else(|| Error::format("PFCKPT", format!("missing entry {name}")))?
                .item()
        };
        let epoch = scalar("state.epoch")? as usize;
        let gen_step = scalar("state.gen_step")? as u64;
        let psd_step = scalar("state.psd_step")? as u64;
        let log_t = checkpoint::find(&entries, "state.log")
            .ok_or_else(|| Error::format("PFCKPT", "missing entry state.log"))?;
        if log_t.shape() != [epoch, 7] {
            return Err(Error::format("PFCKPT", format!("log shape {:?} for {epoch} epochs", log_t.shape())));
        }
        load_store(&entries, "gen.", st.gen.params_mut(), Some(&mut st.gen_adam))?;
        load_store(&entries, "psd.", st.psd.params_mut(), Some(&mut st.psd_adam))?;
        st.gen_adam.step = gen_step;
        st.psd_adam.step = psd_step;
        st.epoch = epoch;
        st.log = log_t.data().chunks(7).map(EpochLog::from_row).collect();
        Ok(st)
    }
}

fn non_finite(detail: String) -> Error {
    Error::NonFinite {
        epoch: 0,
        step: 0,
        detail,
    }
}

fn meta_tensors(a: &AnalysisConfig, b: &BackboneConfig) -> Vec<(String, Tensor)> {
    [
        ("sample_rate", a.sample_rate as f64),
        ("win_len", a.win_len as f64),
        ("hop_len", a.hop_len as f64),
        ("fft_size", a.fft_size as f64),
        ("n_blocks", b.n_blocks as f64),
        ("channels", b.channels as f64),
        ("block_hidden", b.block_hidden as f64),
        ("kernel", b.kernel as f64),
        ("bins", b.bins as f64),
        ("conditioned", if b.conditioned { 1.0 } else { 0.0 }),
    ]
    .into_iter()
    .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(v)))
    .collect()
}

fn read_meta(entries: &[(String, Tensor)]) -> Result<(AnalysisConfig, BackboneConfig)> {
    let get = |k: &str| -> Result<usize> {
        let name = format!("meta.{k}");
        let v = checkpoint::find(entries, &name)
            .ok_or_else(|| Error::format("PFCKPT", format!("missing entry {name}")))?
            .item()?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::format("PFCKPT", format!("{name} = {v} is not a count")));
        }
        Ok(v as usize)
    };
    let analysis = AnalysisConfig {
        sample_rate: get("sample_rate")? as u32,
        win_len: get("win_len")?,
        hop_len: get("hop_len")?,
        fft_size: get("fft_size")?,
        window: crate::spectral::WindowKind::Hann,
    };
    analysis.validate()?;
    let backbone = BackboneConfig {
        n_blocks: get("n_blocks")?,
        channels: get("channels")?,
        block_hidden: get("block_hidden")?,
        kernel: get("kernel")?,
        bins: get("bins")?,
        conditioned: get("conditioned")? == 1,
    };
    backbone.validate()?;
    Ok((analysis, backbone))
}

/// Loads the generator of a training checkpoint together with the analysis
/// settings it was trained for.
pub fn load_generator(path: &Path) -> Result<(PhaseModel, AnalysisConfig)> {
    let entries = checkpoint::read_file(path)?;
    let (analysis, backbone) = read_meta(&entries)?;
    let mut model = PhaseModel::new(backbone, 0)?;
    load_store(&entries, "gen.", model.params_mut(), None)?;
    Ok((model, analysis))
}

/// Trains one stage from scratch for `cfg.epochs` epochs.
pub fn train_stage(cfg: TrainConfig, corpus: &Corpus, frozen_prior: Option<&PhaseModel>) -> Result<TrainState> {
    let mut st = TrainState::new(cfg)?;
    st.run(corpus, frozen_prior, cfg.epochs, |_| Ok(()))?;
    Ok(st)
}

/// Runs `f` on a pool of `threads` workers (the global pool when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SynthSpec};

    fn tiny(stage: Stage) -> TrainConfig {
        let mut cfg = TrainConfig::desk(stage);
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.segment_samples = 512;
        cfg.backbone.n_blocks = 1;
        cfg.backbone.channels = 8;
        cfg.backbone.block_hidden = 8;
        cfg.psd.channels = 4;
        cfg
    }

    #[test]
    fn lr_schedule() {
        let mut cfg = tiny(Stage::Prior);
        cfg.lr0 = 2e-4;
        cfg.lr_decay = 0.999;
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(3), 2e-4 * 0.999f64.powi(3));
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = tiny(Stage::Refine);
        let back = TrainConfig::from_kv(&cfg.to_kv(), None).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg;
        bad.lr_decay = 1.5;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.segment_samples = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn refine_needs_prior() {
        let corpus = gen_synthetic(&SynthSpec::harmonic(2, 0.05, 0)).unwrap();
        let err = train_stage(tiny(Stage::Refine), &corpus, None).unwrap_err();
        assert!(matches!(err, Error::MissingPrior));
    }

    #[test]
    fn one_epoch_is_deterministic_and_logged() {
        let corpus = gen_synthetic(&SynthSpec::harmonic(3, 0.05, 0)).unwrap();
        let a = train_stage(tiny(Stage::Prior), &corpus, None).unwrap();
        let b = train_stage(tiny(Stage::Prior), &corpus, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 1);
        assert!(a.log[0].loss_p > 0.0 && a.log[0].loss_adv_d > 0.0);
        for (x, y) in a.gen.params().iter().zip(b.gen.params().iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.gen_adam.step, 2);
    }
}
