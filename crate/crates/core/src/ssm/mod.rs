//! Selective state-space model: input-dependent parameters, discretization,
//! recurrence solvers and the two-phase (decoupled) solver that exposes raw
//! hidden states to adaptor hooks.

mod scan;
mod zoh;

pub use scan::{
    combine, scan_parallel, scan_parallel_raw, scan_parallel_with, scan_sequential,
    scan_sequential_raw, ScanOptions, DEFAULT_CHUNK,
};
pub use zoh::{
    decay, input_gain, input_gain_partials, zoh_discretize, Discretization, LIMIT_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{self, Tensor, Unary};

/// Δ bias chosen so that softplus(bias) = 0.1, i.e. `ln(e^0.1 − 1)`.
pub const DELTA_BIAS_INIT: f64 = -2.252_168_461_044_090_8;

/// Continuous-time selective SSM over `D` channels with state size `N`.
///
/// `a` is the diagonal of the state matrix for every channel (`[D×N]`,
/// strictly negative). The projections map an input row `u_t ∈ R^D` to the
/// per-step `B_t`, `C_t` and `Δ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    a: Tensor,
    b_proj: Tensor,
    c_proj: Tensor,
    delta_proj: Tensor,
    delta_bias: Tensor,
    d_skip: Tensor,
    per_channel_c: bool,
}

impl ContinuousSsm {
    /// `b_proj`: `[N×D]`; `c_proj`: `[N×D]`, or `[D·N × D]` when
    /// `per_channel_c`; `delta_proj`: `[D×D]`; `delta_bias`, `d_skip`: `[D]`.
    pub fn new(
        a: Tensor,
        b_proj: Tensor,
        c_proj: Tensor,
        delta_proj: Tensor,
        delta_bias: Tensor,
        d_skip: Tensor,
        per_channel_c: bool,
    ) -> Result<Self> {
        let (d, n) = zoh::dims2(&a, "ContinuousSsm")?;
        let c_rows = if per_channel_c { d * n } else { n };
        let ok = b_proj.shape() == [n, d]
            && c_proj.shape() == [c_rows, d]
            && delta_proj.shape() == [d, d]
            && delta_bias.len() == d
            && d_skip.len() == d;
        if !ok {
            return Err(Error::shape(
                "ContinuousSsm",
                format!(
                    "A{:?} B_proj{:?} C_proj{:?} Δ_proj{:?} Δ_bias{:?} D{:?}",
                    a.shape(),
                    b_proj.shape(),
                    c_proj.shape(),
                    delta_proj.shape(),
                    delta_bias.shape(),
                    d_skip.shape()
                ),
            ));
        }
        if let Some(bad) = a.data().iter().find(|&&v| v >= 0.0) {
            return Err(Error::Domain(format!("A entries must be < 0, got {bad}")));
        }
        Ok(Self {
            a,
            b_proj,
            c_proj,
            delta_proj,
            delta_bias: delta_bias.reshape(&[d])?,
            d_skip: d_skip.reshape(&[d])?,
            per_channel_c,
        })
    }

    /// Standard initialization: `A[d, n] = −(n+1)`, projections uniform in
    /// `±1/√D`, Δ bias giving softplus ≈ 0.1 at zero input, unit skip.
    pub fn init(d: usize, n: usize, per_channel_c: bool, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let c_rows = if per_channel_c { d * n } else { n };
        let a = Tensor::from_fn(&[d, n], |i| -((i % n) as f64 + 1.0));
        let b_proj = Tensor::from_fn(&[n, d], |_| rng.uniform(-bound, bound));
        let c_proj = Tensor::from_fn(&[c_rows, d], |_| rng.uniform(-bound, bound));
        let delta_proj = Tensor::from_fn(&[d, d], |_| rng.uniform(-bound, bound));
        Self::new(
            a,
            b_proj,
            c_proj,
            delta_proj,
            Tensor::full(&[d], DELTA_BIAS_INIT),
            Tensor::ones(&[d]),
            per_channel_c,
        )
        .expect("init shapes are consistent")
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }
    pub fn b_proj(&self) -> &Tensor {
        &self.b_proj
    }
    pub fn c_proj(&self) -> &Tensor {
        &self.c_proj
    }
    pub fn delta_proj(&self) -> &Tensor {
        &self.delta_proj
    }
    pub fn delta_bias(&self) -> &Tensor {
        &self.delta_bias
    }
    pub fn d_skip(&self) -> &Tensor {
        &self.d_skip
    }
    pub fn per_channel_c(&self) -> bool {
        self.per_channel_c
    }
}

/// Per-step selective parameters generated from an input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    /// `[L×N]`
    pub b: Tensor,
    /// `[L×N]`, or `[L×D×N]` in the per-channel variant.
    pub c: Tensor,
    /// `[L×D]`, strictly positive.
    pub delta: Tensor,
}

pub fn selective_params(u: &Tensor, model: &ContinuousSsm) -> Result<SelectiveParams> {
    let (l, d) = zoh::dims2(u, "selective_params")?;
    if d != model.channels() {
        return Err(Error::shape(
            "selective_params",
            format!("u{:?} against D = {}", u.shape(), model.channels()),
        ));
    }
    u.ensure_finite("selective_params")?;
    let b = tensor::linear(u, &model.b_proj, None)?;
    let mut c = tensor::linear(u, &model.c_proj, None)?;
    if model.per_channel_c {
        c = c.reshape(&[l, d, model.state()])?;
    }
    let pre = tensor::linear(u, &model.delta_proj, Some(&model.delta_bias))?;
    let delta = tensor::unary(&pre, Unary::Softplus)?;
    if delta.data().iter().any(|&v| v <= 0.0) {
        // softplus underflows to 0 for very negative pre-activations
        return Err(Error::Domain("Δ underflowed to zero".into()));
    }
    Ok(SelectiveParams { b, c, delta })
}

/// Discretized parameters for one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    /// `[L×D×N]`
    pub abar: Tensor,
    /// `B̄_t u_t`, `[L×D×N]`
    pub bu: Tensor,
    pub c: Tensor,
    pub d_skip: Tensor,
    pub delta: Tensor,
}

impl DiscreteSsm {
    pub fn from_input(u: &Tensor, model: &ContinuousSsm, rule: Discretization) -> Result<Self> {
        let sp = selective_params(u, model)?;
        let (abar, bbar) = zoh_discretize(&model.a, &sp.b, &sp.delta, rule)?;
        let bu = forcing(&bbar, u)?;
        Ok(Self {
            abar,
            bu,
            c: sp.c,
            d_skip: model.d_skip.clone(),
            delta: sp.delta,
        })
    }

    pub fn len(&self) -> usize {
        self.abar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `B̄u[t, d, n] = B̄[t, d, n] · u[t, d]`.
pub fn forcing(bbar: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (l, d) = zoh::dims2(u, "forcing")?;
    if bbar.rank() != 3 || bbar.shape()[..2] != [l, d] {
        return Err(Error::shape(
            "forcing",
            format!("B̄{:?} vs u{:?}", bbar.shape(), u.shape()),
        ));
    }
    let n = bbar.shape()[2];
    let mut out = bbar.clone();
    for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
        let uv = u.data()[i];
        row.iter_mut().for_each(|v| *v *= uv);
    }
    out.checked("forcing")
}

fn check_output_shapes(h: &Tensor, c: &Tensor, d_skip: &Tensor, u: &Tensor) -> Result<(usize, usize, usize)> {
    let bad = || {
        Error::shape(
            "output_project",
            format!(
                "h{:?} C{:?} D{:?} u{:?}",
                h.shape(),
                c.shape(),
                d_skip.shape(),
                u.shape()
            ),
        )
    };
    let &[l, d, n] = h.shape() else {
        return Err(bad());
    };
    let c_ok = c.shape() == [l, n] || c.shape() == [l, d, n];
    if !c_ok || d_skip.len() != d || u.shape() != [l, d] {
        return Err(bad());
    }
    Ok((l, d, n))
}

/// `y_t = C_t · h_t + D ⊙ u_t`, contracting over the state axis.
pub fn output_project(h: &Tensor, c: &Tensor, d_skip: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (l, d, n) = check_output_shapes(h, c, d_skip, u)?;
    let shared = c.rank() == 2;
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let hrow = &h.data()[(t * d + ch) * n..(t * d + ch + 1) * n];
            let crow = if shared {
                &c.data()[t * n..(t + 1) * n]
            } else {
                &c.data()[(t * d + ch) * n..(t * d + ch + 1) * n]
            };
            let mut acc = 0.0;
            for s in 0..n {
                acc += crow[s] * hrow[s];
            }
            y[t * d + ch] = acc + d_skip.data()[ch] * u.data()[t * d + ch];
        }
    }
    Tensor::from_parts(vec![l, d], y).checked("output_project")
}

/// Single-phase solver: runs the recurrence and emits `y_t` on the fly
/// without materializing the hidden-state sequence.
pub fn solve_fused(disc: &DiscreteSsm, u: &Tensor) -> Result<Tensor> {
    let (l, d, n) = check_output_shapes(&disc.abar, &disc.c, &disc.d_skip, u)?;
    let shared = disc.c.rank() == 2;
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let base = (t * d + ch) * n;
            let crow = if shared {
                &disc.c.data()[t * n..(t + 1) * n]
            } else {
                &disc.c.data()[base..base + n]
            };
            let mut acc = 0.0;
            for s in 0..n {
                let hv = &mut h[ch * n + s];
                *hv = if t == 0 {
                    disc.bu.data()[base + s]
                } else {
                    disc.abar.data()[base + s] * *hv + disc.bu.data()[base + s]
                };
                acc += crow[s] * *hv;
            }
            y[t * d + ch] = acc + disc.d_skip.data()[ch] * u.data()[t * d + ch];
        }
    }
    Tensor::from_parts(vec![l, d], y).checked("solve_fused")
}

/// A shape-preserving transform applied between solver phases.
pub type Hook<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor>;

/// Two-phase solver.
///
/// Phase 1 runs the recurrence alone, which is what a fused solver returns
/// when handed an identity selector for `C` and zeros for `D`: the raw
/// hidden states `[L×D×N]`. `hidden_hook` transforms them. Phase 2 forms
/// `y = C·h + D·u` and `output_hook` transforms the `[L×D]` result.
pub fn solve_decoupled_discrete(
    disc: &DiscreteSsm,
    u: &Tensor,
    hidden_hook: Option<Hook<'_>>,
    output_hook: Option<Hook<'_>>,
) -> Result<Tensor> {
    let mut h = scan_sequential(&disc.abar, &disc.bu)?;
    if let Some(hook) = hidden_hook {
        let out = hook(&h)?;
        if out.shape() != h.shape() {
            return Err(Error::Contract(format!(
                "hidden hook returned {:?}, expected {:?}",
                out.shape(),
                h.shape()
            )));
        }
        out.ensure_finite("hidden hook")?;
        h = out;
    }
    let mut y = output_project(&h, &disc.c, &disc.d_skip, u)?;
    if let Some(hook) = output_hook {
        let out = hook(&y)?;
        if out.shape() != y.shape() {
            return Err(Error::Contract(format!(
                "output hook returned {:?}, expected {:?}",
                out.shape(),
                y.shape()
            )));
        }
        out.ensure_finite("output hook")?;
        y = out;
    }
    Ok(y)
}

pub fn solve_decoupled(
    u: &Tensor,
    model: &ContinuousSsm,
    rule: Discretization,
    hidden_hook: Option<Hook<'_>>,
    output_hook: Option<Hook<'_>>,
) -> Result<Tensor> {
    let disc = DiscreteSsm::from_input(u, model, rule)?;
    solve_decoupled_discrete(&disc, u, hidden_hook, output_hook)
}
