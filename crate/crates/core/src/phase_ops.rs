//! Anti-wrapping function and the shift/difference operators on F x N phase
//! matrices (rows are frames, columns are frequency bins).
//!
//! Shifts fill vacated rows or columns with zeros, so every difference
//! operator keeps the raw input value on its boundary row or column.
//! Differences are taken on wrapped phase and are only ever consumed through
//! [`anti_wrap`]; nothing here unwraps.

use std::f64::consts::{PI, TAU};

use ndarray::{s, Array2, ArrayView2};

/// `|x - 2pi * round(x / 2pi)|`, the angular distance of `x` from 0.
pub fn anti_wrap(x: f64) -> f64 {
    (x - TAU * (x / TAU).round()).abs()
}

pub fn anti_wrap_matrix(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(anti_wrap)
}

/// Principal value in (-pi, pi].
pub fn wrap(x: f64) -> f64 {
    let r = x - TAU * (x / TAU).round();
    if r <= -PI {
        r + TAU
    } else if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Columns shifted left (column n takes column n+1); last column zero.
pub fn shift_cl(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let n = x.ncols();
    if n > 1 {
        out.slice_mut(s![.., ..n - 1]).assign(&x.slice(s![.., 1..]));
    }
    out
}

/// Columns shifted right (column n takes column n-1); first column zero.
pub fn shift_cr(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let n = x.ncols();
    if n > 1 {
        out.slice_mut(s![.., 1..]).assign(&x.slice(s![.., ..n - 1]));
    }
    out
}

/// Rows shifted up (row f takes row f+1); last row zero.
pub fn shift_ru(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let f = x.nrows();
    if f > 1 {
        out.slice_mut(s![..f - 1, ..]).assign(&x.slice(s![1.., ..]));
    }
    out
}

/// Rows shifted down (row f takes row f-1); first row zero.
pub fn shift_rd(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let f = x.nrows();
    if f > 1 {
        out.slice_mut(s![1.., ..]).assign(&x.slice(s![..f - 1, ..]));
    }
    out
}

/// Time-frequency in-direction difference: `X - shift_cl(shift_ru(X))`.
pub fn diff_tfidd(x: ArrayView2<'_, f64>) -> Array2<f64> {
    &x - &shift_cl(shift_ru(x).view())
}

/// Time-frequency reverse-direction difference: `X - shift_cr(shift_ru(X))`.
pub fn diff_tfrdd(x: ArrayView2<'_, f64>) -> Array2<f64> {
    &x - &shift_cr(shift_ru(x).view())
}

/// Frequency difference (group delay direction): `X - shift_cr(X)`.
pub fn diff_freq(x: ArrayView2<'_, f64>) -> Array2<f64> {
    &x - &shift_cr(x)
}

/// Time difference (instantaneous frequency direction): `X - shift_rd(X)`.
pub fn diff_time(x: ArrayView2<'_, f64>) -> Array2<f64> {
    &x - &shift_rd(x)
}

/// The difference operators that phase losses and metrics are built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseDiff {
    /// Identity (instantaneous phase).
    Ip,
    /// Frequency difference (group delay).
    Gd,
    /// Time difference (instantaneous angular frequency).
    Iaf,
    Tfidd,
    Tfrdd,
}

impl PhaseDiff {
    pub const ALL: [PhaseDiff; 5] = [
        PhaseDiff::Ip,
        PhaseDiff::Gd,
        PhaseDiff::Iaf,
        PhaseDiff::Tfidd,
        PhaseDiff::Tfrdd,
    ];

    pub fn apply(self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            PhaseDiff::Ip => x.to_owned(),
            PhaseDiff::Gd => diff_freq(x),
            PhaseDiff::Iaf => diff_time(x),
            PhaseDiff::Tfidd => diff_tfidd(x),
            PhaseDiff::Tfrdd => diff_tfrdd(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseDiff::Ip => "ip",
            PhaseDiff::Gd => "gd",
            PhaseDiff::Iaf => "iaf",
            PhaseDiff::Tfidd => "tfidd",
            PhaseDiff::Tfrdd => "tfrdd",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn anti_wrap_values() {
        assert_eq!(anti_wrap(0.0), 0.0);
        assert_eq!(anti_wrap(PI), PI);
        assert!((anti_wrap(1.5 * PI) - 0.5 * PI).abs() < 1e-15);
        assert!(anti_wrap(TAU).abs() < 1e-15);
        assert!((anti_wrap(7.5 * PI) - 0.5 * PI).abs() < 1e-14);
    }

    #[test]
    fn wrap_lands_in_principal_range() {
        assert_eq!(wrap(-PI), PI);
        assert_eq!(wrap(PI), PI);
        assert!((wrap(3.0 * PI) - PI).abs() < 1e-15);
        assert!((wrap(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shift_hand_values() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(shift_cl(x.view()), array![[2.0, 0.0], [4.0, 0.0]]);
        assert_eq!(shift_cr(x.view()), array![[0.0, 1.0], [0.0, 3.0]]);
        assert_eq!(shift_ru(x.view()), array![[3.0, 4.0], [0.0, 0.0]]);
        assert_eq!(diff_tfidd(x.view()), array![[-3.0, 2.0], [3.0, 4.0]]);
        assert_eq!(diff_tfrdd(x.view()), array![[1.0, -1.0], [3.0, 4.0]]);
    }

    #[test]
    fn degenerate_shapes_shift_to_zero() {
        let col = array![[1.0], [2.0]];
        assert!(shift_cl(col.view()).iter().all(|&v| v == 0.0));
        assert!(shift_cr(col.view()).iter().all(|&v| v == 0.0));
        let row = array![[1.0, 2.0, 3.0]];
        assert!(shift_ru(row.view()).iter().all(|&v| v == 0.0));
        let one = array![[5.0]];
        assert_eq!(diff_tfidd(one.view()), one);
        assert_eq!(diff_tfrdd(one.view()), one);
    }

    #[test]
    fn constant_and_ramp_differences() {
        let c = Array2::from_elem((3, 4), 2.0);
        let gd = diff_freq(c.view());
        let iaf = diff_time(c.view());
        for ((f, n), &v) in gd.indexed_iter() {
            assert_eq!(v, if n == 0 { 2.0 } else { 0.0 }, "gd {f} {n}");
        }
        for ((f, n), &v) in iaf.indexed_iter() {
            assert_eq!(v, if f == 0 { 2.0 } else { 0.0 }, "iaf {f} {n}");
        }
        let ramp = Array2::from_shape_fn((3, 5), |(_, n)| 0.25 * n as f64);
        assert!(diff_freq(ramp.view())
            .slice(s![.., 1..])
            .iter()
            .all(|&v| v == 0.25));
    }

    #[test]
    fn composition_identity() {
        let x = Array2::from_shape_fn((3, 4), |(f, n)| (f * 4 + n) as f64 + 1.0);
        let mut expect = x.clone();
        expect.column_mut(3).fill(0.0);
        assert_eq!(shift_cl(shift_cr(x.view()).view()), expect);
    }

    fn int_matrix() -> impl Strategy<Value = Array2<f64>> {
        (1usize..7, 1usize..9).prop_flat_map(|(f, n)| {
            proptest::collection::vec(-50i32..50, f * n).prop_map(move |v| {
                Array2::from_shape_vec((f, n), v.into_iter().map(f64::from).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn anti_wrap_properties(x in -1e3f64..1e3, k in -50i32..50) {
            let a = anti_wrap(x);
            prop_assert!((0.0..=PI).contains(&a));
            prop_assert_eq!(anti_wrap(-x), a);
            prop_assert!((anti_wrap(x + TAU * k as f64) - a).abs() < 1e-9);
            if x.abs() <= PI {
                prop_assert_eq!(a, x.abs());
            }
        }

        #[test]
        fn shift_adjoint(x in int_matrix(), seed in 0u64..1000) {
            let y = x.mapv(|v| ((v as i64 * 31 + seed as i64) % 17) as f64);
            let lhs = (&shift_cl(x.view()) * &y).sum();
            let rhs = (&x * &shift_cr(y.view())).sum();
            prop_assert_eq!(lhs, rhs);
            prop_assert_eq!(
                shift_ru(shift_cl(x.view()).view()),
                shift_cl(shift_ru(x.view()).view())
            );
        }

        #[test]
        fn operators_are_linear(x in int_matrix()) {
            let y = x.mapv(|v| 3.0 - v);
            for op in PhaseDiff::ALL {
                let lhs = op.apply((&x * 2.0 - &y * 3.0).view());
                let rhs = op.apply(x.view()) * 2.0 - op.apply(y.view()) * 3.0;
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
