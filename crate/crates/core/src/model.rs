//! The phase prediction networks and the phase spectrum discriminator.
//!
//! Both prediction stages share one backbone: a stem convolution, layer
//! norm, a stack of ConvNeXt v2 blocks, layer norm, a linear layer and the
//! parallel estimation head. Time frames are the convolution axis and
//! frequency bins are channels at the stem and the head. The head emits two
//! pseudo real/imaginary maps and combines them with a principal-value
//! `atan2`, so every output phase lies in (-pi, pi] whatever the weights.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kv::KeyValues;
use crate::tensor::layers::{Conv1d, Conv2d, Grn, LayerNorm, Linear};
use crate::tensor::{ParamStore, Params, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub block_hidden: usize,
    pub kernel: usize,
    pub bins: usize,
    /// Refinement models also take a prior phase as input.
    pub conditioned: bool,
}

impl BackboneConfig {
    /// Eight blocks, 256 channels, 512 hidden units, kernel 7.
    pub fn paper(bins: usize, conditioned: bool) -> Self {
        Self {
            n_blocks: 8,
            channels: 256,
            block_hidden: 512,
            kernel: 7,
            bins,
            conditioned,
        }
    }

    /// Two blocks, 32 channels, 64 hidden units, kernel 7.
    pub fn desk(bins: usize, conditioned: bool) -> Self {
        Self {
            n_blocks: 2,
            channels: 32,
            block_hidden: 64,
            kernel: 7,
            bins,
            conditioned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.channels == 0 || self.block_hidden == 0 || self.bins == 0 {
            return Err(Error::config("channels, block_hidden and bins must be positive"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.conditioned {
            2 * self.bins
        } else {
            self.bins
        }
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("n_blocks", self.n_blocks);
        kv.set("channels", self.channels);
        kv.set("block_hidden", self.block_hidden);
        kv.set("kernel", self.kernel);
        kv.set("bins", self.bins);
        kv.set("conditioned", self.conditioned);
    }

    pub fn from_kv(kv: &KeyValues, defaults: Self) -> Result<Self> {
        let cfg = Self {
            n_blocks: kv.get_or("n_blocks", defaults.n_blocks)?,
            channels: kv.get_or("channels", defaults.channels)?,
            block_hidden: kv.get_or("block_hidden", defaults.block_hidden)?,
            kernel: kv.get_or("kernel", defaults.kernel)?,
            bins: kv.get_or("bins", defaults.bins)?,
            conditioned: kv.get_or("conditioned", defaults.conditioned)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ConvNeXtV2Block {
    dwconv: Conv1d,
    norm: LayerNorm,
    pw1: Linear,
    grn: Grn,
    pw2: Linear,
}

impl ConvNeXtV2Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            dwconv: Conv1d::new(store, &format!("{name}.dwconv"), c, c, cfg.kernel, c, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            pw1: Linear::new(store, &format!("{name}.pw1"), c, cfg.block_hidden, rng)?,
            grn: Grn::new(store, &format!("{name}.grn"), cfg.block_hidden)?,
            pw2: Linear::new(store, &format!("{name}.pw2"), cfg.block_hidden, c, rng)?,
        })
    }

    /// `x + pw2(grn(gelu(pw1(norm(dwconv(x))))))`
    fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let h = self.dwconv.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        let h = self.pw1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.grn.forward(tape, p, h)?;
        let h = self.pw2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// One prediction stage (prior construction or refinement).
#[derive(Debug, Clone)]
pub struct PhaseModel {
    cfg: BackboneConfig,
    params: ParamStore,
    stem: Conv1d,
    stem_norm: LayerNorm,
    blocks: Vec<ConvNeXtV2Block>,
    head_norm: LayerNorm,
    head_linear: Linear,
    pea_real: Conv1d,
    pea_imag: Conv1d,
}

impl PhaseModel {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (c, k) = (cfg.channels, cfg.kernel);
        let stem = Conv1d::new(&mut params, "stem", cfg.input_channels(), c, k, 1, &mut rng)?;
        let stem_norm = LayerNorm::new(&mut params, "stem_norm", c)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| ConvNeXtV2Block::new(&mut params, &format!("blocks.{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = LayerNorm::new(&mut params, "head_norm", c)?;
        let head_linear = Linear::new(&mut params, "head_linear", c, c, &mut rng)?;
        let pea_real = Conv1d::new(&mut params, "pea.real", c, cfg.bins, k, 1, &mut rng)?;
        let pea_imag = Conv1d::new(&mut params, "pea.imag", c, cfg.bins, k, 1, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            stem,
            stem_norm,
            blocks,
            head_norm,
            head_linear,
            pea_real,
            pea_imag,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn bind(&self, trainable: bool) -> Params<'_> {
        if trainable {
            Params::trainable(&self.params)
        } else {
            Params::frozen(&self.params)
        }
    }

    /// Parallel estimation head: `h: [channels, F]` to wrapped phase `[F, N]`.
    pub fn pea_forward(&self, tape: &mut Tape, trainable: bool, h: Var) -> Result<Var> {
        let p = self.bind(trainable);
        let re = self.pea_real.forward(tape, p, h)?;
        let im = self.pea_imag.forward(tape, p, h)?;
        let phase = tape.atan2(im, re)?;
        tape.transpose(phase)
    }

    /// Records a forward pass. `log_amp` and `prior` are `[F, N]`; `prior`
    /// must be given exactly when the model is conditioned.
    pub fn forward(&self, tape: &mut Tape, trainable: bool, log_amp: Var, prior: Option<Var>) -> Result<Var> {
        let bins = self.cfg.bins;
        let check = |tape: &Tape, v: Var, what: &str| -> Result<()> {
            match tape.shape(v) {
                [_, n] if *n == bins => Ok(()),
                s => Err(Error::shape(format!("{what} {s:?}, model expects [F, {bins}]"))),
            }
        };
        check(tape, log_amp, "log amplitude")?;
        let a = tape.transpose(log_amp)?;
        let input = match (self.cfg.conditioned, prior) {
            (false, None) => a,
            (true, Some(pr)) => {
                check(tape, pr, "prior phase")?;
                if tape.shape(pr) != tape.shape(log_amp) {
                    return Err(Error::shape(format!(
                        "prior phase {:?} vs log amplitude {:?}",
                        tape.shape(pr),
                        tape.shape(log_amp)
                    )));
                }
                let pt = tape.transpose(pr)?;
                tape.concat(&[a, pt], 0)?
            }
            (false, Some(_)) => return Err(Error::Contract("prior model takes no prior phase".into())),
            (true, None) => return Err(Error::Contract("refinement model needs a prior phase".into())),
        };
        let p = self.bind(trainable);
        let mut h = self.stem.forward(tape, p, input)?;
        h = self.stem_norm.forward(tape, p, h)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        h = self.head_norm.forward(tape, p, h)?;
        h = self.head_linear.forward(tape, p, h)?;
        self.pea_forward(tape, trainable, h)
    }

    /// Inference without gradients.
    pub fn predict(&self, log_amp: &Array2<f64>, prior: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_array2(log_amp));
        let pr = prior.map(|p| tape.constant(Tensor::from_array2(p)));
        let out = self.forward(&mut tape, false, a, pr)?;
        tape.value(out).to_array2()
    }
}

/// Prior construction: phase from log amplitude alone.
pub fn prior_forward(model: &PhaseModel, log_amp: &Array2<f64>) -> Result<Array2<f64>> {
    if model.config().conditioned {
        return Err(Error::Contract("prior_forward needs an unconditioned model".into()));
    }
    model.predict(log_amp, None)
}

/// Refinement: phase from log amplitude conditioned on a prior phase.
pub fn refine_forward(model: &PhaseModel, log_amp: &Array2<f64>, prior: &Array2<f64>) -> Result<Array2<f64>> {
    if !model.config().conditioned {
        return Err(Error::Contract("refine_forward needs a conditioned model".into()));
    }
    if log_amp.dim() != prior.dim() {
        return Err(Error::shape(format!(
            "log amplitude {:?} vs prior {:?}",
            log_amp.dim(),
            prior.dim()
        )));
    }
    model.predict(log_amp, Some(prior))
}

/// A prior model followed by any number of refinement models.
#[derive(Debug, Clone)]
pub struct PhaseChain {
    pub prior: PhaseModel,
    pub refiners: Vec<PhaseModel>,
}

impl PhaseChain {
    pub fn new(prior: PhaseModel) -> Result<Self> {
        if prior.config().conditioned {
            return Err(Error::Contract("first model of a chain must be unconditioned".into()));
        }
        Ok(Self {
            prior,
            refiners: Vec::new(),
        })
    }

    pub fn push(&mut self, refiner: PhaseModel) -> Result<()> {
        if !refiner.config().conditioned || refiner.config().bins != self.prior.config().bins {
            return Err(Error::Contract("refiners must be conditioned on the same bin count".into()));
        }
        self.refiners.push(refiner);
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.refiners.len()
    }

    /// Total scalar parameters of the prior plus the first `k` refiners.
    pub fn num_params(&self, k: usize) -> usize {
        self.prior.num_params() + self.refiners.iter().take(k).map(PhaseModel::num_params).sum::<usize>()
    }

    /// Output of the prior followed by `k` refinement passes; `k = 0` is the
    /// prior phase itself.
    pub fn iterate(&self, log_amp: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        if k > self.refiners.len() {
            return Err(Error::Contract(format!(
                "{k} iterations requested, only {} refinement models available",
                self.refiners.len()
            )));
        }
        let mut phase = prior_forward(&self.prior, log_amp)?;
        for r in &self.refiners[..k] {
            phase = refine_forward(r, log_amp, &phase)?;
        }
        Ok(phase)
    }

    /// Full chain output.
    pub fn predict(&self, log_amp: &Array2<f64>) -> Result<Array2<f64>> {
        self.iterate(log_amp, self.depth())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdConfig {
    pub channels: usize,
    pub slope: f64,
}

impl PsdConfig {
    /// 64 channels per hidden layer.
    pub fn paper() -> Self {
        Self {
            channels: 64,
            slope: 0.1,
        }
    }

    /// 16 channels per hidden layer.
    pub fn desk() -> Self {
        Self {
            channels: 16,
            slope: 0.1,
        }
    }
}

/// Hidden layer kernels (time x frequency) and strides.
const PSD_LAYERS: [((usize, usize), (usize, usize)); 5] = [
    ((7, 5), (2, 2)),
    ((5, 3), (2, 2)),
    ((5, 3), (2, 2)),
    ((3, 3), (1, 1)),
    ((3, 3), (1, 1)),
];

/// Phase spectrum discriminator: five strided 2D convolutions with leaky
/// ReLU, then a one-channel 3x3 output convolution.
#[derive(Debug, Clone)]
pub struct Psd {
    cfg: PsdConfig,
    params: ParamStore,
    hidden: Vec<Conv2d>,
    output: Conv2d,
}

/// Score map plus the five post-activation feature maps.
#[derive(Debug, Clone)]
pub struct PsdOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

impl Psd {
    pub fn new(cfg: PsdConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 1;
        let mut hidden = Vec::new();
        for (i, &(k, s)) in PSD_LAYERS.iter().enumerate() {
            hidden.push(Conv2d::new(
                &mut params,
                &format!("conv.{i}"),
                cin,
                cfg.channels,
                k,
                s,
                (k.0 / 2, k.1 / 2),
                &mut rng,
            )?);
            cin = cfg.channels;
        }
        let output = Conv2d::new(&mut params, "out", cin, 1, (3, 3), (1, 1), (1, 1), &mut rng)?;
        Ok(Self {
            cfg,
            params,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &PsdConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Spatial size of the score map for an `frames x bins` input.
    pub fn score_dims(frames: usize, bins: usize) -> (usize, usize) {
        PSD_LAYERS.iter().fold((frames, bins), |(h, w), &(k, s)| {
            ((h + 2 * (k.0 / 2) - k.0) / s.0 + 1, (w + 2 * (k.1 / 2) - k.1) / s.1 + 1)
        })
    }

    /// Scores a `[F, N]` phase map.
    pub fn forward(&self, tape: &mut Tape, trainable: bool, phase: Var) -> Result<PsdOutput> {
        let p = if trainable {
            Params::trainable(&self.params)
        } else {
            Params::frozen(&self.params)
        };
        let (f, n) = match tape.shape(phase) {
            [f, n] => (*f, *n),
            s => return Err(Error::shape(format!("PSD input {s:?}, expected [F, N]"))),
        };
        let mut h = tape.reshape(phase, &[1, f, n])?;
        let mut features = Vec::with_capacity(self.hidden.len());
        for conv in &self.hidden {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, self.cfg.slope);
            features.push(h);
        }
        let score = self.output.forward(tape, p, h)?;
        Ok(PsdOutput { score, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tiny(conditioned: bool) -> BackboneConfig {
        BackboneConfig {
            n_blocks: 1,
            channels: 8,
            block_hidden: 12,
            kernel: 3,
            bins: 9,
            conditioned,
        }
    }

    fn log_amp(frames: usize, bins: usize) -> Array2<f64> {
        Array2::from_shape_fn((frames, bins), |(f, n)| ((f * 3 + n * 7) % 11) as f64 * 0.3 - 1.5)
    }

    fn in_range(p: &Array2<f64>) -> bool {
        p.iter().all(|&v| v > -PI && v <= PI)
    }

    #[test]
    fn prior_output_shape_range_and_purity() {
        let m = PhaseModel::new(tiny(false), 3).unwrap();
        let a = log_amp(10, 9);
        let p1 = prior_forward(&m, &a).unwrap();
        let p2 = prior_forward(&m, &a).unwrap();
        assert_eq!(p1.dim(), (10, 9));
        assert!(in_range(&p1));
        assert_eq!(p1, p2);
        assert_eq!(prior_forward(&m, &log_amp(20, 9)).unwrap().dim(), (20, 9));
        assert!(prior_forward(&m, &log_amp(10, 8)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PhaseModel::new(tiny(false), 7).unwrap();
        let b = PhaseModel::new(tiny(false), 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn refiner_stem_takes_twice_the_bins() {
        let m = PhaseModel::new(tiny(true), 1).unwrap();
        let w = m.params().find("stem.weight").unwrap();
        assert_eq!(m.params().get(w).value.shape(), &[8, 18, 3]);
        let a = log_amp(6, 9);
        let p = Array2::zeros((6, 9));
        let out = refine_forward(&m, &a, &p).unwrap();
        assert!(in_range(&out));
        assert!(refine_forward(&m, &a, &Array2::zeros((5, 9))).is_err());
        assert!(prior_forward(&m, &a).is_err());
    }

    #[test]
    fn chain_iteration_bookkeeping() {
        let prior = PhaseModel::new(tiny(false), 1).unwrap();
        let mut chain = PhaseChain::new(prior.clone()).unwrap();
        let r1 = PhaseModel::new(tiny(true), 2).unwrap();
        chain.push(r1.clone()).unwrap();
        let a = log_amp(7, 9);
        assert_eq!(chain.iterate(&a, 0).unwrap(), prior_forward(&prior, &a).unwrap());
        let expect = refine_forward(&r1, &a, &prior_forward(&prior, &a).unwrap()).unwrap();
        assert_eq!(chain.iterate(&a, 1).unwrap(), expect);
        assert!(chain.iterate(&a, 2).is_err());
        assert_eq!(chain.num_params(1), prior.num_params() + r1.num_params());
    }

    #[test]
    fn psd_shapes() {
        let psd = Psd::new(PsdConfig { channels: 4, slope: 0.1 }, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[65, 65]));
        let out = psd.forward(&mut tape, false, x).unwrap();
        assert_eq!(out.features.len(), 5);
        assert_eq!(tape.shape(out.score), &[1, 9, 9]);
        assert_eq!(Psd::score_dims(65, 65), (9, 9));
        assert_eq!(tape.shape(out.features[0]), &[4, 33, 33]);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = tiny(true);
        let mut kv = KeyValues::new();
        cfg.to_kv(&mut kv);
        let back = BackboneConfig::from_kv(&kv, BackboneConfig::desk(1, false)).unwrap();
        assert_eq!(back, cfg);
    }
}
