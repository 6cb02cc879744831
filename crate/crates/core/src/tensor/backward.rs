use super::gemm::gemm;
use super::ops::{gelu_grad, split_axis, Op};
use super::{ParamId, Tape, Tensor, Var};
use crate::{Error, Result};

/// Gradients of one scalar loss, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// `(store id, param, gradient)` for every trainable parameter leaf.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(s, p, i)| self.grads[i].as_ref().map(|g| (s, p, g)))
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::State(
                "backward called with a variable that was not produced on this tape".into(),
            ));
        }
        let n = self.node(loss).value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.index + 1) {
            if let Op::Leaf { param: Some((s, p)) } = node.op {
                params.push((s, p, i));
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|data| Tensor {
                        shape: self.nodes[i].value.shape.clone(),
                        data,
                    })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulates `f(i)` into the gradient of `v` when it requires one.
        let add_each = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if self.nodes[v.index].requires_grad {
                let dst = acc(&mut grads[v.index], g.len());
                dst.iter_mut().enumerate().for_each(|(i, d)| *d += f(i));
            }
        };
        let val = |v: Var| &self.nodes[v.index].value.data;
        let rg = |v: Var| self.nodes[v.index].requires_grad;

        match *op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_each(grads, a, &|i| g[i]);
                add_each(grads, b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                add_each(grads, a, &|i| g[i]);
                add_each(grads, b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                add_each(grads, a, &|i| g[i] * vb[i]);
                add_each(grads, b, &|i| g[i] * va[i]);
            }
            Op::Scale(x, s) => add_each(grads, x, &|i| g[i] * s),
            Op::AddScalar(x) | Op::Reshape(x) => add_each(grads, x, &|i| g[i]),
            Op::Exp(x) => add_each(grads, x, &|i| g[i] * out.data[i]),
            Op::Log(x) => {
                let v = val(x);
                add_each(grads, x, &|i| g[i] / v[i]);
            }
            Op::Abs(x) => {
                let v = val(x);
                add_each(grads, x, &|i| {
                    if v[i] > 0.0 {
                        g[i]
                    } else if v[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Square(x) => {
                let v = val(x);
                add_each(grads, x, &|i| 2.0 * v[i] * g[i]);
            }
            Op::Gelu(x) => {
                let v = val(x);
                add_each(grads, x, &|i| g[i] * gelu_grad(v[i]));
            }
            Op::Relu(x) => {
                let v = val(x);
                add_each(grads, x, &|i| if v[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::LeakyRelu(x, slope) => {
                let v = val(x);
                add_each(grads, x, &|i| if v[i] > 0.0 { g[i] } else { slope * g[i] });
            }
            Op::Atan2 { y, x } => {
                let (vy, vx) = (val(y), val(x));
                let r2 = |i: usize| vx[i] * vx[i] + vy[i] * vy[i];
                add_each(grads, y, &|i| {
                    let r = r2(i);
                    if r > 1e-20 {
                        g[i] * vx[i] / r
                    } else {
                        0.0
                    }
                });
                add_each(grads, x, &|i| {
                    let r = r2(i);
                    if r > 1e-20 {
                        -g[i] * vy[i] / r
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(x) => {
                if rg(x) {
                    let n = val(x).len();
                    acc(&mut grads[x.index], n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if rg(x) {
                    let n = val(x).len();
                    let s = g[0] / n as f64;
                    acc(&mut grads[x.index], n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::L2Norm { x, axis } => {
                if rg(x) {
                    let v = val(x);
                    let shape = &self.nodes[x.index].value.shape;
                    let (outer, len, inner) = split_axis(shape, axis);
                    let dst = acc(&mut grads[x.index], v.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let nrm = out.data[o * inner + i];
                            if nrm == 0.0 {
                                continue;
                            }
                            let s = g[o * inner + i] / nrm;
                            for a in 0..len {
                                let k = (o * len + a) * inner + i;
                                dst[k] += s * v[k];
                            }
                        }
                    }
                }
            }
            Op::Concat { ref inputs, axis } => {
                let (outer, total, inner) = split_axis(&out.shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.index].value.shape[axis];
                    if rg(v) {
                        let dst = acc(&mut grads[v.index], outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            dst[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                if rg(x) {
                    let (c, r) = (out.shape[0], out.shape[1]);
                    let dst = acc(&mut grads[x.index], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Shift { x, kind } => {
                if rg(x) {
                    let (r, c) = (out.shape[0], out.shape[1]);
                    let back = kind.adjoint().apply(r, c, g);
                    let dst = acc(&mut grads[x.index], r * c);
                    dst.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
            }
            Op::MatMul(a, b) => {
                let sa = &self.nodes[a.index].value.shape;
                let (m, k, n) = (sa[0], sa[1], out.shape[1]);
                if rg(a) {
                    let dst = acc(&mut grads[a.index], m * k);
                    gemm(m, n, k, g, false, val(b), true, dst, true);
                }
                if rg(b) {
                    let dst = acc(&mut grads[b.index], k * n);
                    gemm(k, m, n, val(a), true, g, false, dst, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (cout, t) = (out.shape[0], out.shape[1]);
                let cin = self.nodes[x.index].value.shape[0];
                if rg(w) {
                    let dst = acc(&mut grads[w.index], cout * cin);
                    gemm(cout, t, cin, g, false, val(x), true, dst, true);
                }
                if rg(x) {
                    let dst = acc(&mut grads[x.index], cin * t);
                    gemm(cin, cout, t, val(w), true, g, false, dst, true);
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let dst = acc(&mut grads[b.index], cout);
                    for (co, row) in g.chunks(t).enumerate() {
                        dst[co] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                groups,
                ref cols,
            } => {
                let (cout, t) = (out.shape[0], out.shape[1]);
                let ws = &self.nodes[w.index].value.shape;
                let (cin_g, k) = (ws[1], ws[2]);
                let cout_g = cout / groups;
                let pad = k / 2;
                let wlen = cout_g * cin_g * k;
                for gi in 0..groups {
                    let gy = &g[gi * cout_g * t..(gi + 1) * cout_g * t];
                    if rg(w) {
                        let dst = acc(&mut grads[w.index], cout * cin_g * k);
                        gemm(
                            cout_g,
                            t,
                            cin_g * k,
                            gy,
                            false,
                            &cols[gi],
                            true,
                            &mut dst[gi * wlen..(gi + 1) * wlen],
                            true,
                        );
                    }
                    if rg(x) {
                        let mut dcols = vec![0.0; cin_g * k * t];
                        gemm(
                            cin_g * k,
                            cout_g,
                            t,
                            &val(w)[gi * wlen..(gi + 1) * wlen],
                            true,
                            gy,
                            false,
                            &mut dcols,
                            false,
                        );
                        let cin = cin_g * groups;
                        let dst = acc(&mut grads[x.index], cin * t);
                        for ci in 0..cin_g {
                            let dx = &mut dst[(gi * cin_g + ci) * t..(gi * cin_g + ci + 1) * t];
                            for kk in 0..k {
                                let row = &dcols[(ci * k + kk) * t..(ci * k + kk + 1) * t];
                                let lo = pad.saturating_sub(kk);
                                let hi = (t + pad).saturating_sub(kk).min(t);
                                for j in lo..hi {
                                    dx[j + kk - pad] += row[j];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let dst = acc(&mut grads[b.index], cout);
                    for (co, row) in g.chunks(t).enumerate() {
                        dst[co] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                ref cols,
            } => {
                let cout = out.shape[0];
                let plane = out.shape[1] * out.shape[2];
                let kdim = geom.cin * geom.kh * geom.kw;
                if rg(w) {
                    let dst = acc(&mut grads[w.index], cout * kdim);
                    gemm(cout, plane, kdim, g, false, cols, true, dst, true);
                }
                if rg(x) {
                    let mut dcols = vec![0.0; kdim * plane];
                    gemm(kdim, cout, plane, val(w), true, g, false, &mut dcols, false);
                    let dst = acc(&mut grads[x.index], geom.cin * geom.h * geom.w);
                    geom.col2im(&dcols, dst);
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let dst = acc(&mut grads[b.index], cout);
                    for (co, p) in g.chunks(plane).enumerate() {
                        dst[co] += p.iter().sum::<f64>();
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (c, t) = (out.shape[0], out.shape[1]);
                let gv = val(gamma);
                if rg(gamma) {
                    let dst = acc(&mut grads[gamma.index], c);
                    for i in 0..c {
                        dst[i] += (0..t).map(|j| g[i * t + j] * xhat[i * t + j]).sum::<f64>();
                    }
                }
                if rg(beta) {
                    let dst = acc(&mut grads[beta.index], c);
                    for i in 0..c {
                        dst[i] += g[i * t..(i + 1) * t].iter().sum::<f64>();
                    }
                }
                if rg(x) {
                    let dst = acc(&mut grads[x.index], c * t);
                    let cf = c as f64;
                    for j in 0..t {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..c {
                            let dh = g[i * t + j] * gv[i];
                            s1 += dh;
                            s2 += dh * xhat[i * t + j];
                        }
                        for i in 0..c {
                            let dh = g[i * t + j] * gv[i];
                            dst[i * t + j] +=
                                inv_std[j] / cf * (cf * dh - s1 - xhat[i * t + j] * s2);
                        }
                    }
                }
            }
            Op::Grn {
                x,
                gamma,
                beta,
                ref norms,
                denom,
            } => {
                let (c, t) = (out.shape[0], out.shape[1]);
                let (xv, gv) = (val(x), val(gamma));
                if rg(gamma) {
                    let dst = acc(&mut grads[gamma.index], c);
                    for i in 0..c {
                        let n = norms[i] / denom;
                        dst[i] += (0..t).map(|j| g[i * t + j] * xv[i * t + j]).sum::<f64>() * n;
                    }
                }
                if rg(beta) {
                    let dst = acc(&mut grads[beta.index], c);
                    for i in 0..c {
                        dst[i] += g[i * t..(i + 1) * t].iter().sum::<f64>();
                    }
                }
                if rg(x) {
                    // dL/dn_i = gamma_i * sum_t g * x
                    let dn: Vec<f64> = (0..c)
                        .map(|i| gv[i] * (0..t).map(|j| g[i * t + j] * xv[i * t + j]).sum::<f64>())
                        .collect();
                    let cross: f64 = dn.iter().zip(norms).map(|(d, n)| d * n).sum();
                    let dst = acc(&mut grads[x.index], c * t);
                    for i in 0..c {
                        let n = norms[i] / denom;
                        let dnorm = dn[i] / denom - cross / (c as f64 * denom * denom);
                        let scale = if norms[i] > 0.0 { dnorm / norms[i] } else { 0.0 };
                        for j in 0..t {
                            let k = i * t + j;
                            dst[k] += g[k] * (1.0 + gv[i] * n) + scale * xv[k];
                        }
                    }
                }
            }
        }
    }
}
