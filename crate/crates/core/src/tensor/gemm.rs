//! Row-major matrix product and convolution unfolding helpers.

/// `C (m x n) (+)= op(A) * op(B)` where `op(A)` is `m x k` and `op(B)` is
/// `k x n`. With `trans_a`, `a` is stored as `k x m`; with `trans_b`, `b` is
/// stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    /// Unfolds `x` (`cin x h x w`) into `(cin*kh*kw) x (out_h*out_w)`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols_n = oh * ow;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * cols_n];
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * cols_n;
                    for y in 0..oh {
                        let src_y = (y * self.sh + i) as isize - self.ph as isize;
                        if src_y < 0 || src_y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + src_y as usize) * self.w;
                        for xo in 0..ow {
                            let src_x = (xo * self.sw + j) as isize - self.pw as isize;
                            if src_x >= 0 && src_x < self.w as isize {
                                cols[row + y * ow + xo] = x[base + src_x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols_n = oh * ow;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * cols_n;
                    for y in 0..oh {
                        let src_y = (y * self.sh + i) as isize - self.ph as isize;
                        if src_y < 0 || src_y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + src_y as usize) * self.w;
                        for xo in 0..ow {
                            let src_x = (xo * self.sw + j) as isize - self.pw as isize;
                            if src_x >= 0 && src_x < self.w as isize {
                                dx[base + src_x as usize] += cols[row + y * ow + xo];
                            }
                        }
                    }
                }
            }
        }
    }
}
