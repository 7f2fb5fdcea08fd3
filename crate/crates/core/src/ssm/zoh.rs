//! Zero-order-hold discretization of a diagonal continuous SSM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|ΔA|` the closed form is replaced by its limit `B̄ = ΔB`.
pub const LIMIT_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`
    #[default]
    Zoh,
    /// `B̄ = ΔB`, the simplified rule used by practical Mamba kernels.
    Euler,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "euler" => Ok(Discretization::Euler),
            other => Err(Error::Config(format!("unknown discretization `{other}`"))),
        }
    }
}

/// `Ā = exp(ΔA)` for one scalar pair.
#[inline]
pub fn decay(delta: f64, a: f64) -> f64 {
    (delta * a).exp()
}

/// `B̄` for one (Δ, A, B) triple.
#[inline]
pub fn input_gain(delta: f64, a: f64, b: f64, rule: Discretization) -> f64 {
    match rule {
        Discretization::Euler => delta * b,
        Discretization::Zoh => {
            let x = delta * a;
            if x.abs() < LIMIT_THRESHOLD {
                delta * b
            } else {
                x.exp_m1() / x * delta * b
            }
        }
    }
}

/// Partial derivatives of `input_gain` with respect to (Δ, A, B).
#[inline]
pub fn input_gain_partials(delta: f64, a: f64, b: f64, rule: Discretization) -> (f64, f64, f64) {
    match rule {
        Discretization::Euler => (b, 0.0, delta),
        Discretization::Zoh => {
            let x = delta * a;
            if x.abs() < LIMIT_THRESHOLD {
                (b, 0.5 * delta * delta * b, delta)
            } else {
                let ex = x.exp();
                let d_delta = ex * b;
                // (x eˣ − eˣ + 1)/x², series near 0 to avoid cancellation
                let h = if x.abs() < 1e-3 {
                    0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
                } else {
                    (x * ex - x.exp_m1()) / (x * x)
                };
                let d_a = b * delta * delta * h;
                let d_b = x.exp_m1() / x * delta;
                (d_delta, d_a, d_b)
            }
        }
    }
}

/// Discretizes `a[D×N]` against per-step `b_seq[L×N]` and `delta[L×D]`,
/// returning `(Ā, B̄)`, both `[L×D×N]`.
pub fn zoh_discretize(
    a: &Tensor,
    b_seq: &Tensor,
    delta: &Tensor,
    rule: Discretization,
) -> Result<(Tensor, Tensor)> {
    let (d, n) = dims2(a, "zoh_discretize")?;
    let (l, n_b) = dims2(b_seq, "zoh_discretize")?;
    if n_b != n || delta.shape() != [l, d] {
        return Err(Error::shape(
            "zoh_discretize",
            format!(
                "A{:?}, B{:?}, Δ{:?}",
                a.shape(),
                b_seq.shape(),
                delta.shape()
            ),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain(format!("Δ must be > 0, got {bad}")));
    }
    let mut abar = vec![0.0; l * d * n];
    let mut bbar = vec![0.0; l * d * n];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            for s in 0..n {
                let av = a.data()[c * n + s];
                let off = (t * d + c) * n + s;
                abar[off] = decay(dt, av);
                bbar[off] = input_gain(dt, av, b_seq.data()[t * n + s], rule);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![l, d, n], abar).checked("zoh_discretize")?,
        Tensor::from_parts(vec![l, d, n], bbar).checked("zoh_discretize")?,
    ))
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}
