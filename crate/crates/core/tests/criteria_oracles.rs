use std::f64::consts::{PI, TAU};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phaseforge::criteria::{loss_tfid, pd_metric, pd_tfid};
use phaseforge::phase_ops::PhaseDiff;
use phaseforge::tensor::{Tape, Tensor};

fn phases(rng: &mut ChaCha8Rng, f: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((f, n), |_| PI - rng.random::<f64>() * TAU)
}

fn aw(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    r.min(TAU - r)
}

fn get(x: &Array2<f64>, f: isize, n: isize) -> f64 {
    let (rows, cols) = x.dim();
    if f < 0 || n < 0 || f as usize >= rows || n as usize >= cols {
        0.0
    } else {
        x[[f as usize, n as usize]]
    }
}

/// Diagonal difference at (f, n) with the column offset `dn` (+1 in-direction,
/// -1 reverse).
fn diag(x: &Array2<f64>, f: usize, n: usize, dn: isize) -> f64 {
    x[[f, n]] - get(x, f as isize + 1, n as isize + dn)
}

#[test]
fn tfid_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let est = phases(&mut rng, 4, 5);
        let tgt = phases(&mut rng, 4, 5);
        let mut expect = 0.0;
        for dn in [1, -1] {
            let mut s = 0.0;
            for f in 0..4 {
                for n in 0..5 {
                    s += aw(diag(&est, f, n, dn) - diag(&tgt, f, n, dn));
                }
            }
            expect += s / 20.0;
        }
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::from_array2(&est));
        let t = tape.constant(Tensor::from_array2(&tgt));
        let l = loss_tfid(&mut tape, e, t).unwrap();
        let got = tape.value(l).item().unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn pd_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let est = phases(&mut rng, 6, 9);
    let tgt = phases(&mut rng, 6, 9);
    let ops: [(PhaseDiff, fn(&Array2<f64>, usize, usize) -> f64); 3] = [
        (PhaseDiff::Ip, |x, f, n| x[[f, n]]),
        (PhaseDiff::Gd, |x, f, n| x[[f, n]] - get(x, f as isize, n as isize - 1)),
        (PhaseDiff::Iaf, |x, f, n| x[[f, n]] - get(x, f as isize - 1, n as isize)),
    ];
    for (kind, op) in ops {
        let mut expect = 0.0;
        for n in 0..9 {
            let mut s = 0.0;
            for f in 0..6 {
                s += aw(op(&tgt, f, n) - op(&est, f, n)).powi(2);
            }
            expect += (s / 6.0).sqrt();
        }
        expect /= 9.0;
        let got = pd_metric(est.view(), tgt.view(), kind).unwrap();
        assert!((got - expect).abs() < 1e-12, "{kind:?}: {got} vs {expect}");
    }
}

#[test]
fn pd_ip_of_independent_phases_is_pi_over_root_three() {
    // Anti-wrapped differences of independent uniform phases are uniform on
    // [0, pi], whose RMS is pi / sqrt(3).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let est = phases(&mut rng, 4000, 16);
    let tgt = phases(&mut rng, 4000, 16);
    let got = pd_metric(est.view(), tgt.view(), PhaseDiff::Ip).unwrap();
    let expect = PI / 3f64.sqrt();
    assert!((got / expect - 1.0).abs() < 0.02, "{got} vs {expect}");
}

#[test]
fn metrics_ignore_whole_turns_and_are_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let est = phases(&mut rng, 7, 11);
    let tgt = phases(&mut rng, 7, 11);
    let turns = Array2::from_shape_fn((7, 11), |(f, n)| TAU * ((f * 3 + n) % 5) as f64 - 2.0 * TAU);
    let shifted = &est + &turns;
    for kind in PhaseDiff::ALL {
        let a = pd_metric(est.view(), tgt.view(), kind).unwrap();
        let b = pd_metric(shifted.view(), tgt.view(), kind).unwrap();
        let c = pd_metric(tgt.view(), est.view(), kind).unwrap();
        assert!((a - b).abs() < 1e-12, "{kind:?} shift");
        assert!((a - c).abs() < 1e-12, "{kind:?} swap");
    }
    assert_eq!(pd_tfid(est.view(), est.view()).unwrap(), 0.0);
}
