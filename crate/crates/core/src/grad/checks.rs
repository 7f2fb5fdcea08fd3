//! Registered primitives and a random finite-difference instance for each.
//!
//! Every instance reduces the primitive's output to a scalar with a fixed
//! random weighting so no gradient coordinate is trivially symmetric.

use std::sync::Arc;

use super::{fd_check, CoeffVars, FdReport, ParamGroup, ParamStore, RetainVars, Tape, Var};
use crate::adaptor_t::{AdaptorTConfig, SelectionMode};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::ssm::Discretization;
use crate::tensor::{Tensor, Unary};

pub type PrimitiveCheck = fn(u64) -> Result<FdReport>;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// `Σ out ⊙ w` for a fixed random `w` drawn from `seed`.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = random_tensor(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let w = tape.leaf(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn store_of(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.add(*name, t.clone(), ParamGroup::Backbone);
    }
    s
}

fn p(tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
    tape.param(store, store.find(name).expect("registered"))
}

fn run<F>(store: ParamStore, seed: u64, f: F) -> Result<FdReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut rng = SplitMix64::new(seed ^ 0xF00D);
    fd_check(&store, |s, t| {
        let out = f(s, t)?;
        weighted_sum(t, out, seed.wrapping_add(77))
    }, &mut rng)
}

fn check_matmul(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[
        ("a", random_tensor(&[3, 4], -1.0, 1.0, &mut r)),
        ("b", random_tensor(&[4, 2], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        t.matmul(a, b)
    })
}

fn check_linear(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[
        ("x", random_tensor(&[5, 3], -1.0, 1.0, &mut r)),
        ("w", random_tensor(&[4, 3], -1.0, 1.0, &mut r)),
        ("b", random_tensor(&[4], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (x, w, b) = (p(t, s, "x"), p(t, s, "w"), p(t, s, "b"));
        t.linear(x, w, Some(b))
    })
}

fn check_softmax(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let axis = (seed % 2) as usize;
    let store = store_of(&[("x", random_tensor(&[3, 4], -2.0, 2.0, &mut r))]);
    run(store, seed, move |s, t| {
        let x = p(t, s, "x");
        t.softmax(x, axis)
    })
}

fn check_layer_norm(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[
        ("x", random_tensor(&[4, 6], -2.0, 2.0, &mut r)),
        ("g", random_tensor(&[6], 0.5, 1.5, &mut r)),
        ("b", random_tensor(&[6], -0.5, 0.5, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (x, g, b) = (p(t, s, "x"), p(t, s, "g"), p(t, s, "b"));
        t.layer_norm(x, g, b, 1e-5)
    })
}

fn check_elementwise(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[
        ("a", random_tensor(&[3, 3], -2.0, 2.0, &mut r)),
        ("b", random_tensor(&[3, 3], -2.0, 2.0, &mut r)),
        ("s", random_tensor(&[1], 0.5, 1.5, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (a, b, k) = (p(t, s, "a"), p(t, s, "b"), p(t, s, "s"));
        let ab = t.mul(a, b)?;
        let d = t.sub(ab, b)?;
        let g = t.unary(Unary::Gelu, d)?;
        let e = t.unary(Unary::Softplus, a)?;
        let e = t.unary(Unary::Silu, e)?;
        let e = t.unary(Unary::Sigmoid, e)?;
        let sum = t.add(g, e)?;
        let sc = t.mul(sum, k)?;
        let ex = t.scale(sc, 0.3)?;
        t.unary(Unary::Exp, ex)
    })
}

fn check_gather(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[("x", random_tensor(&[2, 3, 2], -1.0, 1.0, &mut r))]);
    // repeated indices exercise gradient accumulation
    let mut idx: Vec<usize> = (0..12).collect();
    r.shuffle(&mut idx);
    idx.extend([0, 0, 5]);
    let idx: Arc<[usize]> = idx.into();
    run(store, seed, move |s, t| {
        let x = p(t, s, "x");
        let g = t.gather(x, idx.clone(), &[5, 3])?;
        let m = t.mean_rows(g)?;
        t.reshape(m, &[3, 1])
    })
}

fn check_zoh(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let (l, d, n) = (3, 2, 3);
    let rule = if seed % 3 == 2 {
        Discretization::Euler
    } else {
        Discretization::Zoh
    };
    let store = store_of(&[
        ("delta", random_tensor(&[l, d], 0.05, 1.0, &mut r)),
        ("a", random_tensor(&[d, n], -2.0, -0.2, &mut r)),
        ("b", random_tensor(&[l, n], -1.0, 1.0, &mut r)),
        ("u", random_tensor(&[l, d], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, move |s, t| {
        let (dl, a, b, u) = (p(t, s, "delta"), p(t, s, "a"), p(t, s, "b"), p(t, s, "u"));
        let abar = t.zoh_decay(dl, a)?;
        let bu = t.zoh_forcing(dl, a, b, u, rule)?;
        t.add(abar, bu)
    })
}

fn check_scan(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let store = store_of(&[
        ("abar", random_tensor(&[8, 2, 3], 0.0, 1.0, &mut r)),
        ("bu", random_tensor(&[8, 2, 3], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (a, b) = (p(t, s, "abar"), p(t, s, "bu"));
        t.scan(a, b)
    })
}

fn check_output_project(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let c_shape: &[usize] = if seed % 2 == 0 { &[4, 3] } else { &[4, 2, 3] };
    let store = store_of(&[
        ("h", random_tensor(&[4, 2, 3], -1.0, 1.0, &mut r)),
        ("c", random_tensor(c_shape, -1.0, 1.0, &mut r)),
        ("d", random_tensor(&[2], -1.0, 1.0, &mut r)),
        ("u", random_tensor(&[4, 2], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, |s, t| {
        let (h, c, d, u) = (p(t, s, "h"), p(t, s, "c"), p(t, s, "d"), p(t, s, "u"));
        t.output_project(h, c, d, u)
    })
}

fn check_depthwise_conv(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let dilation = 1 + (seed % 2) as usize;
    let store = store_of(&[
        ("y", random_tensor(&[5, 4, 2], -1.0, 1.0, &mut r)),
        ("w", random_tensor(&[2, 3, 3], -1.0, 1.0, &mut r)),
    ]);
    run(store, seed, move |s, t| {
        let (y, w) = (p(t, s, "y"), p(t, s, "w"));
        t.depthwise_conv(y, w, dilation)
    })
}

fn check_sample_state(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let len = 6;
    // keep clear of integral positions where the slope jumps
    let pos = r.below(len - 1) as f64 + r.uniform(0.1, 0.9);
    let store = store_of(&[
        ("h", random_tensor(&[len, 3], -1.0, 1.0, &mut r)),
        ("p", Tensor::scalar(pos)),
    ]);
    run(store, seed, |s, t| {
        let (h, pv) = (p(t, s, "h"), p(t, s, "p"));
        t.sample_state(h, pv)
    })
}

fn retain_case(seed: u64, mode: SelectionMode, sharing: bool, causal: bool) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let (l, d, n, k, routes) = (6, 2, 3, 3, 2);
    let route = (seed % routes as u64) as usize;
    let mut cfg = AdaptorTConfig::new(k, routes);
    cfg.mode = mode;
    cfg.causal = causal;
    cfg.weight_sharing = sharing;
    let mut entries = vec![
        ("h", random_tensor(&[l, d, n], -1.0, 1.0, &mut r)),
        ("pos_w", random_tensor(&[k * routes, n], -1.0, 1.0, &mut r)),
        ("pos_b", random_tensor(&[k * routes], -1.0, 1.0, &mut r)),
    ];
    if sharing {
        entries.push(("coef", random_tensor(&[routes, k], -1.0, 1.0, &mut r)));
    } else {
        entries.push(("coef_w", random_tensor(&[k * routes, n], -1.0, 1.0, &mut r)));
        entries.push(("coef_b", random_tensor(&[k * routes], -1.0, 1.0, &mut r)));
    }
    let store = store_of(&entries);
    run(store, seed, move |s, t| {
        let h = p(t, s, "h");
        let coeffs = if sharing {
            CoeffVars::Shared(p(t, s, "coef"))
        } else {
            CoeffVars::Predicted {
                w: p(t, s, "coef_w"),
                b: p(t, s, "coef_b"),
            }
        };
        let vars = RetainVars {
            pos_w: p(t, s, "pos_w"),
            pos_b: p(t, s, "pos_b"),
            coeffs,
        };
        t.retain(h, vars, &cfg, route)
    })
}

fn check_retain(seed: u64) -> Result<FdReport> {
    retain_case(seed, SelectionMode::Learnable, false, seed % 2 == 0)
}

fn check_retain_shared(seed: u64) -> Result<FdReport> {
    retain_case(seed, SelectionMode::Learnable, true, true)
}

fn check_retain_static(seed: u64) -> Result<FdReport> {
    retain_case(seed, SelectionMode::Static, false, true)
}

fn check_cross_entropy(seed: u64) -> Result<FdReport> {
    let mut r = SplitMix64::new(seed);
    let label = r.below(5);
    let store = store_of(&[("z", random_tensor(&[5], -3.0, 3.0, &mut r))]);
    run(store, seed, move |s, t| {
        let z = p(t, s, "z");
        t.cross_entropy(z, label)
    })
}

/// Every differentiable primitive the tape records, with its check.
pub const PRIMITIVES: &[(&str, PrimitiveCheck)] = &[
    ("matmul", check_matmul),
    ("linear", check_linear),
    ("softmax", check_softmax),
    ("layer_norm", check_layer_norm),
    ("elementwise", check_elementwise),
    ("gather", check_gather),
    ("zoh", check_zoh),
    ("scan", check_scan),
    ("output_project", check_output_project),
    ("depthwise_conv2d", check_depthwise_conv),
    ("sample_state", check_sample_state),
    ("retain", check_retain),
    ("retain_shared", check_retain_shared),
    ("retain_static", check_retain_static),
    ("cross_entropy", check_cross_entropy),
];
