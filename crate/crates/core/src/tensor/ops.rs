//! Forward definitions of every differentiable operation.

use std::f64::consts::PI;

use super::gemm::{gemm, Conv2dGeom};
use super::{ParamId, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// Columns left, last column zero.
    ColsLeft,
    /// Columns right, first column zero.
    ColsRight,
    /// Rows up, last row zero.
    RowsUp,
    /// Rows down, first row zero.
    RowsDown,
}

impl ShiftKind {
    pub(crate) fn adjoint(self) -> Self {
        match self {
            ShiftKind::ColsLeft => ShiftKind::ColsRight,
            ShiftKind::ColsRight => ShiftKind::ColsLeft,
            ShiftKind::RowsUp => ShiftKind::RowsDown,
            ShiftKind::RowsDown => ShiftKind::RowsUp,
        }
    }

    pub(crate) fn apply(self, rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                let src = match self {
                    ShiftKind::ColsLeft => (c + 1 < cols).then(|| (r, c + 1)),
                    ShiftKind::ColsRight => (c > 0).then(|| (r, c - 1)),
                    ShiftKind::RowsUp => (r + 1 < rows).then(|| (r + 1, c)),
                    ShiftKind::RowsDown => (r > 0).then(|| (r - 1, c)),
                };
                if let Some((sr, sc)) = src {
                    out[r * cols + c] = x[sr * cols + sc];
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf {
        param: Option<(u64, ParamId)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        /// Unfolded input per group, `(cin_g*k) x t`.
        cols: Vec<Vec<f64>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Grn {
        x: Var,
        gamma: Var,
        beta: Var,
        norms: Vec<f64>,
        denom: f64,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Atan2 {
        y: Var,
        x: Var,
    },
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    L2Norm {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Shift {
        x: Var,
        kind: ShiftKind,
    },
}

/// (outer, axis, inner) sizes of `shape` split around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Principal atan2 in (-pi, pi] with atan2(0, 0) = 0.
pub fn atan2_principal(y: f64, x: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    if a <= -PI {
        PI
    } else {
        a
    }
}

impl Tape {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        let rg = self.node(x).requires_grad;
        self.push(out, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |a| a * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |a| a + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |a| if a > 0.0 { a } else { slope * a }, Op::LeakyRelu(x, slope))
    }

    /// Rounds to the nearest integer; the result is a constant (zero gradient).
    pub fn round_detached(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.round()).collect(),
        };
        self.constant(out)
    }

    /// Copy of `x` cut off from the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Elementwise principal-value `atan2(y, x)` in (-pi, pi].
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(y, x, "atan2", atan2_principal, Op::Atan2 { y, x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean absolute value.
    pub fn l1(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.mean(a)
    }

    /// Euclidean norm along `axis`; that axis is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", v.shape)));
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let e = v.data[(o * len + a) * inner + i];
                    data[o * inner + i] += e * e;
                }
            }
        }
        data.iter_mut().for_each(|d| *d = d.sqrt());
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor { shape, data }, Op::L2Norm { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape[axis];
                data.extend_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.data.len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", v.shape)));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn matrix_dims(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x)[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let v = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut data, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn shift(&mut self, x: Var, kind: ShiftKind) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "shift")?;
        let data = kind.apply(r, c, &self.value(x).data);
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data,
            },
            Op::Shift { x, kind },
            rg,
        ))
    }

    fn check_bias(&self, b: Option<Var>, cout: usize, what: &str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("{what} bias {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// 1D convolution over `x: [cin, t]` with `w: [cout, cin/groups, k]`,
    /// stride 1 and zero "same" padding (odd `k`).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (cin, t) = self.matrix_dims(x, "conv1d input")?;
        let (cout, cin_g, k) = match self.shape(w)[..] {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::shape(format!("conv1d weight {s:?}"))),
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv1d: cin {cin}, cout {cout}, groups {groups}, weight in-channels {cin_g}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv1d kernel {k} must be odd")));
        }
        self.check_bias(b, cout, "conv1d")?;
        let pad = k / 2;
        let cout_g = cout / groups;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; cout * t];
        let mut all_cols = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut cols = vec![0.0; cin_g * k * t];
            for ci in 0..cin_g {
                let src = &xv[(g * cin_g + ci) * t..(g * cin_g + ci + 1) * t];
                for kk in 0..k {
                    let row = &mut cols[(ci * k + kk) * t..(ci * k + kk + 1) * t];
                    // row[j] = src[j + kk - pad]
                    let lo = pad.saturating_sub(kk);
                    let hi = (t + pad).saturating_sub(kk).min(t);
                    for j in lo..hi {
                        row[j] = src[j + kk - pad];
                    }
                }
            }
            gemm(
                cout_g,
                cin_g * k,
                t,
                &wv[g * cout_g * cin_g * k..],
                false,
                &cols,
                false,
                &mut out[g * cout_g * t..(g + 1) * cout_g * t],
                false,
            );
            all_cols.push(cols);
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for (co, row) in out.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![cout, t],
                data: out,
            },
            Op::Conv1d {
                x,
                w,
                b,
                groups,
                cols: if rg { all_cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// 2D convolution over `x: [cin, h, w]` with `w: [cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (cin, h, wd) = match self.shape(x)[..] {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::shape(format!("conv2d input {s:?}"))),
        };
        let (cout, cin_w, kh, kw) = match self.shape(w)[..] {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape(format!("conv2d weight {s:?}"))),
        };
        if cin != cin_w || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape(format!("conv2d: input channels {cin} vs weight {cin_w}")));
        }
        if h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        self.check_bias(b, cout, "conv2d")?;
        let geom = Conv2dGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = geom.im2col(&self.value(x).data);
        let mut out = vec![0.0; cout * oh * ow];
        gemm(cout, cin * kh * kw, oh * ow, &self.value(w).data, false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![cout, oh, ow],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Per-position affine map over channels: `x: [cin, t]`, `w: [cout, cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, t) = self.matrix_dims(x, "linear input")?;
        let (cout, cin_w) = self.matrix_dims(w, "linear weight")?;
        if cin != cin_w {
            return Err(Error::shape(format!("linear: input {cin} vs weight {cin_w}")));
        }
        self.check_bias(b, cout, "linear")?;
        let mut out = vec![0.0; cout * t];
        gemm(cout, cin, t, &self.value(w).data, false, &self.value(x).data, false, &mut out, false);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for (co, row) in out.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![cout, t],
                data: out,
            },
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// Layer normalization across the channel axis of `x: [c, t]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, t) = self.matrix_dims(x, "layer_norm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("layer_norm affine params must be [{c}]")));
        }
        let xv = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; c * t];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; c * t];
        for j in 0..t {
            let mean = (0..c).map(|i| xv[i * t + j]).sum::<f64>() / c as f64;
            let var = (0..c).map(|i| (xv[i * t + j] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[j] = inv;
            for i in 0..c {
                let h = (xv[i * t + j] - mean) * inv;
                xhat[i * t + j] = h;
                out[i * t + j] = g[i] * h + bt[i];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor {
                shape: vec![c, t],
                data: out,
            },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Global response normalization over `x: [c, t]`: per-channel L2 norm
    /// `g` across time, `n = g / (mean(g) + eps)`,
    /// `out = gamma * (x * n) + beta + x`.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, t) = self.matrix_dims(x, "grn input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("grn affine params must be [{c}]")));
        }
        let xv = &self.value(x).data;
        let norms: Vec<f64> = xv
            .chunks(t)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let denom = norms.iter().sum::<f64>() / c as f64 + eps;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = vec![0.0; c * t];
        for i in 0..c {
            let n = norms[i] / denom;
            for j in 0..t {
                let v = xv[i * t + j];
                out[i * t + j] = g[i] * (v * n) + bt[i] + v;
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor {
                shape: vec![c, t],
                data: out,
            },
            Op::Grn {
                x,
                gamma,
                beta,
                norms,
                denom,
            },
            rg,
        ))
    }
}
