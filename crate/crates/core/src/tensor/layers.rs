//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] at construction and binds them on every forward pass.
//!
//! Convolution and linear weights start uniform in `±1/sqrt(fan_in)`; layer
//! norm starts at `gamma = 1, beta = 0`; GRN starts at `gamma = beta = 0`,
//! which makes it the identity.

use rand::Rng;

use super::{ParamId, ParamStore, Params, Tape, Tensor, Var};
use crate::Result;

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("sized")
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin / groups * kernel;
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, &[cout, cin / groups, kernel], fan_in),
            )?,
            bias: store.add(format!("{name}.bias"), uniform(rng, &[cout], fan_in))?,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.bind(tape, self.weight);
        let b = p.bind(tape, self.bias);
        tape.conv1d(x, w, Some(b), self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, &[cout, cin, kernel.0, kernel.1], fan_in),
            )?,
            bias: store.add(format!("{name}.bias"), uniform(rng, &[cout], fan_in))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.bind(tape, self.weight);
        let b = p.bind(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[cout, cin], cin))?,
            bias: store.add(format!("{name}.bias"), uniform(rng, &[cout], cin))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.bind(tape, self.weight);
        let b = p.bind(tape, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let g = p.bind(tape, self.gamma);
        let b = p.bind(tape, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Grn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Grn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let g = p.bind(tape, self.gamma);
        let b = p.bind(tape, self.beta);
        tape.grn(x, g, b, self.eps)
    }
}
