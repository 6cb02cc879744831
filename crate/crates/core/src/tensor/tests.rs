use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::check;
use super::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Reduces `y` to a scalar through fixed pseudo-random weights so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = check(inputs, f, 1e-5, None, 0).unwrap();
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn atan2_principal_values() {
    let mut t = Tape::new();
    let y = t.constant(Tensor::new(&[4], vec![0.0, 1.0, 0.0, -0.0]).unwrap());
    let x = t.constant(Tensor::new(&[4], vec![1.0, 0.0, -1.0, -1.0]).unwrap());
    let a = t.atan2(y, x).unwrap();
    assert_eq!(t.value(a).data(), &[0.0, PI / 2.0, PI, PI]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn anti_wrap_composite_gradient_is_sign() {
    let vals = vec![0.3, -2.0, 4.0, -5.5, 9.0];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[5], vals.clone()).unwrap());
    let q = t.scale(x, 1.0 / TAU);
    let r = t.round_detached(q);
    let r = t.scale(r, TAU);
    let d = t.sub(x, r).unwrap();
    let a = t.abs(d);
    let s = t.sum(a);
    let g = t.backward(s).unwrap();
    let expect: Vec<f64> = vals
        .iter()
        .map(|v| (v - TAU * (v / TAU).round()).signum())
        .collect();
    assert_eq!(g.wrt(x).unwrap().data(), &expect[..]);
}

#[test]
fn unused_leaf_gets_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let y = t.leaf(Tensor::scalar(3.0));
    let z = t.square(x);
    let g = t.backward(z).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[4.0]);
    assert!(g.wrt(y).is_none());

    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(1.0)).unwrap();
    let b = store.add("b", Tensor::scalar(1.0)).unwrap();
    let mut t = Tape::new();
    let pa = Params::trainable(&store).bind(&mut t, a);
    let _pb = Params::trainable(&store).bind(&mut t, b);
    let l = t.scale(pa, 3.0);
    let g = t.backward(l).unwrap();
    store.accumulate(&g, 1.0);
    assert_eq!(store.get(a).grad.data(), &[3.0]);
    assert_eq!(store.get(b).grad.data(), &[0.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0)).unwrap();
    let mut t = Tape::new();
    let pa = Params::trainable(&store).bind(&mut t, a);
    let l = t.square(pa);
    for _ in 0..2 {
        let g = t.backward(l).unwrap();
        store.accumulate(&g, 1.0);
    }
    assert_eq!(store.get(a).grad.data(), &[8.0]);
    store.zero_grad();
    assert_eq!(store.get(a).grad.data(), &[0.0]);
}

#[test]
fn frozen_params_are_constants() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0)).unwrap();
    let mut t = Tape::new();
    let pa = Params::frozen(&store).bind(&mut t, a);
    assert!(!t.requires_grad(pa));
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    let other = Tape::new();
    assert!(matches!(other.backward(x), Err(Error::State(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2]));
    let b = t.leaf(Tensor::zeros(&[3]));
    assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
    let m = t.leaf(Tensor::zeros(&[2, 3]));
    assert!(t.matmul(m, m).is_err());
}

#[test]
fn grn_with_equal_channel_norms_is_affine() {
    let mut t = Tape::new();
    // every channel has the same L2 norm across time
    let x = t.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 2.0, 1.0, -1.0, 2.0]).unwrap());
    let g = t.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    let y = t.grn(x, g, b, 0.0).unwrap();
    let xs = t.value(x).data().to_vec();
    let (gs, bs) = ([0.5, -1.0, 2.0], [0.1, 0.2, 0.3]);
    for (i, v) in t.value(y).data().iter().enumerate() {
        let c = i / 2;
        let expect = gs[c] * xs[i] + bs[c] + xs[i];
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn conv2d_output_geometry() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 65, 65]));
    let w = t.constant(Tensor::zeros(&[4, 1, 7, 5]));
    let y = t.conv2d(x, w, None, (2, 2), (3, 2)).unwrap();
    assert_eq!(t.shape(y), &[4, 33, 33]);
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cin, cout, k, len) = (3, 2, 3, 6);
    let x = randn(&mut rng, &[cin, len]);
    let w = randn(&mut rng, &[cout, cin, k]);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv1d(xv, wv, None, 1).unwrap();
    for co in 0..cout {
        for j in 0..len {
            let mut s = 0.0;
            for ci in 0..cin {
                for kk in 0..k {
                    let src = j as isize + kk as isize - 1;
                    if (0..len as isize).contains(&src) {
                        s += w.data()[(co * cin + ci) * k + kk] * x.data()[ci * len + src as usize];
                    }
                }
            }
            assert!((t.value(y).data()[co * len + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_of_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let s = t.sub(m, v[1])?;
        let e = t.exp(v[0]);
        let y = t.add(s, e)?;
        project(t, y)
    });
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let y = t.atan2(v[0], v[1])?;
        project(t, y)
    });
    assert_grad(&[a.clone()], |t, v| {
        let g = t.gelu(v[0]);
        let l = t.leaky_relu(g, 0.1);
        project(t, l)
    });
    let pos = Tensor::new(&[5], vec![0.3, 1.2, 2.0, 0.7, 5.0]).unwrap();
    assert_grad(&[pos], |t, v| {
        let y = t.log(v[0]);
        project(t, y)
    });
}

#[test]
fn gradients_of_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let c = randn(&mut rng, &[3, 2]);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    });
    assert_grad(&[a.clone(), c.clone()], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        let y = t.transpose(y)?;
        project(t, y)
    });
    assert_grad(&[a.clone()], |t, v| {
        let n = t.l2_norm(v[0], 1)?;
        let n0 = t.l2_norm(v[0], 0)?;
        let s0 = project(t, n)?;
        let s1 = project(t, n0)?;
        t.add(s0, s1)
    });
    for kind in [
        ShiftKind::ColsLeft,
        ShiftKind::ColsRight,
        ShiftKind::RowsUp,
        ShiftKind::RowsDown,
    ] {
        assert_grad(&[a.clone()], |t, v| {
            let y = t.shift(v[0], kind)?;
            project(t, y)
        });
    }
}

#[test]
fn gradients_of_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[4, 7]);
    let w = randn(&mut rng, &[6, 2, 3]);
    let b = randn(&mut rng, &[6]);
    assert_grad(&[x.clone(), w, b], |t, v| {
        let y = t.conv1d(v[0], v[1], Some(v[2]), 2)?;
        project(t, y)
    });
    let wl = randn(&mut rng, &[3, 4]);
    let bl = randn(&mut rng, &[3]);
    assert_grad(&[x.clone(), wl, bl], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y)
    });
    let g = randn(&mut rng, &[4]);
    let bt = randn(&mut rng, &[4]);
    assert_grad(&[x.clone(), g.clone(), bt.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        project(t, y)
    });
    assert_grad(&[x.clone(), g, bt], |t, v| {
        let y = t.grn(v[0], v[1], v[2], 1e-6)?;
        project(t, y)
    });
    let x2 = randn(&mut rng, &[2, 7, 6]);
    let w2 = randn(&mut rng, &[3, 2, 3, 3]);
    let b2 = randn(&mut rng, &[3]);
    assert_grad(&[x2, w2, b2], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1))?;
        project(t, y)
    });
}

#[test]
fn exact_zero_gradients_are_not_scored_against_rounding_noise() {
    // Neighbouring cells often cancel in the frequency-difference loss, leaving
    // analytic gradients of exactly zero.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [randn(&mut rng, &[6, 7]), randn(&mut rng, &[6, 7])];
    let r = check(&inputs, |t, v| crate::criteria::loss_gd(t, v[0], v[1]), 1e-5, None, 0).unwrap();
    assert!(r.noise_limited > 0);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
    assert_eq!(r.checked, 84);
}
