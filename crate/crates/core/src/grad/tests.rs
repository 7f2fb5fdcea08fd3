use super::checks::{random_tensor, weighted_sum, PRIMITIVES};
use super::*;
use crate::rng::SplitMix64;

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, check) in PRIMITIVES {
        for seed in 0..20 {
            let r = check(seed).unwrap();
            assert!(
                r.max_rel_error <= 1e-4,
                "{name} seed {seed}: {} at {:?}",
                r.max_rel_error,
                r.worst
            );
            assert!(r.coords_checked > 0);
        }
    }
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = SplitMix64::new(3);
    let mut store = ParamStore::new();
    store.add("w", random_tensor(&[6], -2.0, 2.0, &mut rng), ParamGroup::Backbone);
    let r = fd_check(
        &store,
        |s, t| {
            let w = t.param(s, ParamId(0));
            let sq = t.mul(w, w)?;
            t.sum(sq)
        },
        &mut rng,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);

    let mut tape = Tape::new();
    let w = tape.param(&store, ParamId(0));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    let expect = store.value(ParamId(0)).map(|v| 2.0 * v);
    assert_eq!(g.wrt(w).unwrap(), &expect);
}

#[test]
fn scan_adjoint_edge_cases() {
    let mut rng = SplitMix64::new(5);
    // L = 1: the whole gradient lands on B̄u
    let a = random_tensor(&[1, 2, 2], 0.0, 1.0, &mut rng);
    let h = random_tensor(&[1, 2, 2], -1.0, 1.0, &mut rng);
    let g = random_tensor(&[1, 2, 2], -1.0, 1.0, &mut rng);
    let (ga, gb) = vjp::vjp_scan(&a, &h, &g);
    assert_eq!(gb, g);
    assert!(ga.data().iter().all(|&v| v == 0.0));
    // Ā ≡ 0 decouples the steps
    let a = Tensor::zeros(&[5, 1, 3]);
    let h = random_tensor(&[5, 1, 3], -1.0, 1.0, &mut rng);
    let g = random_tensor(&[5, 1, 3], -1.0, 1.0, &mut rng);
    assert_eq!(vjp::vjp_scan(&a, &h, &g).1, g);
}

#[test]
fn softmax_uniform_all_ones_gives_zero() {
    let y = crate::tensor::softmax(&Tensor::zeros(&[2, 4]), 1).unwrap();
    let gx = vjp::vjp_softmax(&y, 1, &Tensor::ones(&[2, 4]));
    assert!(gx.data().iter().all(|&v| v.abs() < 1e-16));
}

#[test]
fn identity_kernel_passes_gradient_through() {
    let mut rng = SplitMix64::new(9);
    let y = random_tensor(&[4, 5, 2], -1.0, 1.0, &mut rng);
    let mut w = Tensor::zeros(&[2, 3, 3]);
    w.set(&[0, 1, 1], 1.0);
    w.set(&[1, 1, 1], 1.0);
    let g = random_tensor(&[4, 5, 2], -1.0, 1.0, &mut rng);
    for dil in [1, 2] {
        assert_eq!(vjp::vjp_depthwise_conv2d(&y, &w, dil, &g).unwrap().0, g);
    }
}

#[test]
fn sample_state_position_gradient() {
    let h = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 5.0, 4.0, 9.0]).unwrap();
    let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let (gh, gp) = vjp::vjp_sample_state(&h, 0.25, &g);
    assert_eq!(gp, (2.0 - 0.0) + (5.0 - 1.0));
    assert_eq!(gh.data(), &[0.75, 0.75, 0.25, 0.25, 0.0, 0.0]);
}

#[test]
fn backward_is_bit_reproducible() {
    let store = {
        let mut rng = SplitMix64::new(12);
        let mut s = ParamStore::new();
        s.add("abar", random_tensor(&[16, 3, 4], 0.0, 1.0, &mut rng), ParamGroup::Backbone);
        s.add("bu", random_tensor(&[16, 3, 4], -1.0, 1.0, &mut rng), ParamGroup::Backbone);
        s
    };
    let mut tape = Tape::new();
    let a = tape.param(&store, ParamId(0));
    let b = tape.param(&store, ParamId(1));
    let h = tape.scan(a, b).unwrap();
    let loss = weighted_sum(&mut tape, h, 4).unwrap();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    for v in [a, b] {
        assert_eq!(g1.wrt(v).unwrap().data(), g2.wrt(v).unwrap().data());
    }
}

#[test]
fn parameter_gradients_accumulate_across_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(3.0), ParamGroup::Backbone);
    let mut tape = Tape::new();
    let w1 = tape.param(&store, id);
    let w2 = tape.param(&store, id);
    let s = tape.mul(w1, w2).unwrap();
    let loss = tape.sum(s).unwrap();
    tape.backward(loss).unwrap().accumulate(&mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[6.0]);
    store.zero_grads();
    assert_eq!(store.get(id).grad.data(), &[0.0]);
}

#[test]
fn foreign_variables_are_rejected() {
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = t1.leaf(Tensor::ones(&[2]));
    let b = t2.leaf(Tensor::ones(&[2]));
    assert!(matches!(t2.add(a, b), Err(Error::Tape(_))));
    let s = t1.sum(a).unwrap();
    assert!(t2.backward(s).is_err());
    let v = t1.mul(a, a).unwrap();
    assert!(matches!(t1.backward(v), Err(Error::Tape(_))));
}

#[test]
fn non_finite_loss_is_an_error() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(800.0), ParamGroup::Backbone);
    let r = fd_check(
        &store,
        |s, t| {
            let w = t.param(s, ParamId(0));
            let e = t.unary(crate::tensor::Unary::Exp, w)?;
            t.sum(e)
        },
        &mut SplitMix64::new(0),
    );
    assert!(r.is_err());
}
