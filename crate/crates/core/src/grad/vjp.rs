//! Vector-Jacobian products for every primitive the tape records.
//!
//! Each function takes the forward inputs (and output where it is cheaper
//! than recomputing) plus the upstream gradient `g`, and returns gradients
//! for the inputs in argument order.

use crate::adaptor_s::check_conv;
use crate::adaptor_t::{
    position_scale, route_rows, seq_dims, stencil, AdaptorTParams, Coefficients,
    RetainTrace, SelectionMode,
};
use crate::error::{Error, Result};
use crate::ssm::{decay, input_gain, input_gain_partials, Discretization};
use crate::tensor::{self, row_stats, sigmoid, Tensor, Unary};

/// `(ḡ_a, ḡ_b)` for `a[M×K] · b[K×N]`.
pub fn vjp_matmul(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = tensor::matmul(g, &b.transpose()?)?;
    let gb = tensor::matmul(&a.transpose()?, g)?;
    Ok((ga, gb))
}

pub fn vjp_unary(x: &Tensor, op: Unary, g: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| g.data()[i] * op.derivative(x.data()[i]))
}

/// Softmax VJP from its output `y`: `ḡ_x = y ⊙ (g − Σ g⊙y)` along `axis`.
pub fn vjp_softmax(y: &Tensor, axis: usize, g: &Tensor) -> Tensor {
    let shape = y.shape();
    let outer: usize = shape[..axis].iter().product();
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * k + j) * inner + i;
            let dot: f64 = (0..k).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
            for j in 0..k {
                out[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// `(ḡ_x, ḡ_gain, ḡ_bias)` for row-wise layer normalization.
pub fn vjp_layer_norm(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; d];
    let mut gbias = vec![0.0; d];
    for ((row, grow), gxrow) in x.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
        let (mean, rstd) = row_stats(row, eps);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
        let gxhat: Vec<f64> = (0..d).map(|j| grow[j] * gain.data()[j]).collect();
        let m1 = gxhat.iter().sum::<f64>() / d as f64;
        let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gxrow[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
            ggain[j] += grow[j] * xhat[j];
            gbias[j] += grow[j];
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![d], ggain),
        Tensor::from_parts(vec![d], gbias),
    )
}

/// Reverse recurrence: `λ_t = ḡ_t + Ā_{t+1} ⊙ λ_{t+1}`, giving
/// `ḡ_B̄u = λ` and `ḡ_Ā,t = λ_t ⊙ h_{t−1}` with `h_{−1} = 0`.
pub fn vjp_scan(abar: &Tensor, h: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let l = abar.shape()[0];
    let lanes = abar.len() / l;
    let mut lambda = vec![0.0; abar.len()];
    let mut ga = vec![0.0; abar.len()];
    for t in (0..l).rev() {
        for j in 0..lanes {
            let i = t * lanes + j;
            let carry = if t + 1 < l {
                abar.data()[i + lanes] * lambda[i + lanes]
            } else {
                0.0
            };
            lambda[i] = g.data()[i] + carry;
            if t > 0 {
                ga[i] = lambda[i] * h.data()[i - lanes];
            }
        }
    }
    (
        Tensor::from_parts(abar.shape().to_vec(), ga),
        Tensor::from_parts(abar.shape().to_vec(), lambda),
    )
}

/// `(ḡ_Δ, ḡ_A)` for `Ā[t,d,n] = exp(Δ[t,d]·A[d,n])`.
pub fn vjp_zoh_decay(delta: &Tensor, a: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (l, d) = (delta.shape()[0], delta.shape()[1]);
    let n = a.shape()[1];
    let mut gd = vec![0.0; l * d];
    let mut ga = vec![0.0; d * n];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            for s in 0..n {
                let av = a.data()[c * n + s];
                let e = g.data()[(t * d + c) * n + s] * decay(dt, av);
                gd[t * d + c] += e * av;
                ga[c * n + s] += e * dt;
            }
        }
    }
    (
        Tensor::from_parts(vec![l, d], gd),
        Tensor::from_parts(vec![d, n], ga),
    )
}

/// `(ḡ_Δ, ḡ_A, ḡ_B, ḡ_u)` for `B̄u[t,d,n] = B̄(Δ[t,d], A[d,n], B[t,n])·u[t,d]`.
pub fn vjp_zoh_forcing(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    u: &Tensor,
    rule: Discretization,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (l, d) = (delta.shape()[0], delta.shape()[1]);
    let n = a.shape()[1];
    let mut gd = vec![0.0; l * d];
    let mut ga = vec![0.0; d * n];
    let mut gb = vec![0.0; l * n];
    let mut gu = vec![0.0; l * d];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            let uv = u.data()[t * d + c];
            for s in 0..n {
                let av = a.data()[c * n + s];
                let bv = b.data()[t * n + s];
                let gv = g.data()[(t * d + c) * n + s];
                let (pd, pa, pb) = input_gain_partials(dt, av, bv, rule);
                gd[t * d + c] += gv * uv * pd;
                ga[c * n + s] += gv * uv * pa;
                gb[t * n + s] += gv * uv * pb;
                gu[t * d + c] += gv * input_gain(dt, av, bv, rule);
            }
        }
    }
    (
        Tensor::from_parts(vec![l, d], gd),
        Tensor::from_parts(vec![d, n], ga),
        Tensor::from_parts(vec![l, n], gb),
        Tensor::from_parts(vec![l, d], gu),
    )
}

/// `(ḡ_h, ḡ_C, ḡ_D, ḡ_u)` for `y_t = C_t·h_t + D⊙u_t`.
pub fn vjp_output_project(
    h: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    u: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (l, d, n) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let shared = c.rank() == 2;
    let mut gh = vec![0.0; h.len()];
    let mut gc = vec![0.0; c.len()];
    let mut gdk = vec![0.0; d];
    let mut gu = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let gv = g.data()[t * d + ch];
            let hb = (t * d + ch) * n;
            let cb = if shared { t * n } else { hb };
            for s in 0..n {
                gh[hb + s] = gv * c.data()[cb + s];
                gc[cb + s] += gv * h.data()[hb + s];
            }
            gdk[ch] += gv * u.data()[t * d + ch];
            gu[t * d + ch] = gv * d_skip.data()[ch];
        }
    }
    (
        Tensor::from_parts(h.shape().to_vec(), gh),
        Tensor::from_parts(c.shape().to_vec(), gc),
        Tensor::from_parts(d_skip.shape().to_vec(), gdk),
        Tensor::from_parts(u.shape().to_vec(), gu),
    )
}

/// `(ḡ_y, ḡ_w)` for `depthwise_conv2d`.
pub fn vjp_depthwise_conv2d(
    y: &Tensor,
    weights: &Tensor,
    dilation: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w, d, kh, kw) = check_conv(y, weights, dilation)?;
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let dil = dilation as isize;
    let mut gy = vec![0.0; y.len()];
    let mut gw = vec![0.0; weights.len()];
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * d;
            for a in 0..kh {
                let si = i as isize + dil * (a as isize - ch);
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let sj = j as isize + dil * (b as isize - cw);
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * d;
                    for c in 0..d {
                        let wi = (c * kh + a) * kw + b;
                        gy[src + c] += weights.data()[wi] * g.data()[o + c];
                        gw[wi] += y.data()[src + c] * g.data()[o + c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(y.shape().to_vec(), gy),
        Tensor::from_parts(weights.shape().to_vec(), gw),
    ))
}

/// `(ḡ_h, ḡ_p)` for `sample_state(h[L×N], p)`. The position gradient is
/// `(h_{⌊p⌋+1} − h_{⌊p⌋})·g`, zero where the position is clamped.
pub fn vjp_sample_state(h: &Tensor, p: f64, g: &Tensor) -> (Tensor, f64) {
    let (len, n) = (h.shape()[0], h.shape()[1]);
    let mut gh = vec![0.0; h.len()];
    let inside = (0.0..=(len - 1) as f64).contains(&p);
    let (lo, hi, f) = stencil(p, len);
    for s in 0..n {
        gh[lo * n + s] += (1.0 - f) * g.data()[s];
        if f != 0.0 {
            gh[hi * n + s] += f * g.data()[s];
        }
    }
    let upper = if f != 0.0 { hi } else { lo + 1 };
    let gp = if inside && upper < len {
        (0..n)
            .map(|s| (h.data()[upper * n + s] - h.data()[lo * n + s]) * g.data()[s])
            .sum()
    } else {
        0.0
    };
    (Tensor::from_parts(h.shape().to_vec(), gh), gp)
}

/// Gradients of the adaptor-T parameters.
#[derive(Clone, Debug)]
pub struct RetainGrads {
    pub h: Tensor,
    pub pos_w: Tensor,
    pub pos_b: Tensor,
    pub coeffs: Coefficients,
}

/// VJP of `retain_traced`, reusing its recorded positions and coefficients.
pub fn vjp_retain(
    h: &Tensor,
    params: &AdaptorTParams,
    route: usize,
    trace: &RetainTrace,
    g: &Tensor,
) -> Result<RetainGrads> {
    let (len, d, n) = seq_dims(h)?;
    let cfg = &params.config;
    let k = cfg.k;
    if trace.coeffs.len() != len * d * k || trace.positions.len() != len * d * k {
        return Err(Error::Tape("retain trace does not match its input".into()));
    }
    let rows = route_rows(cfg, route);
    let at = |t: usize, c: usize| (t * d + c) * n;

    let mut gh = g.data().to_vec();
    let mut gpw = Tensor::zeros(params.pos_w.shape());
    let mut gpb = Tensor::zeros(params.pos_b.shape());
    let mut gcoef = match &params.coeffs {
        Coefficients::Predicted { w, b } => Coefficients::Predicted {
            w: Tensor::zeros(w.shape()),
            b: Tensor::zeros(b.shape()),
        },
        Coefficients::Shared(t) => Coefficients::Shared(Tensor::zeros(t.shape())),
    };

    let mut gc = vec![0.0; k];
    for t in 0..len {
        for c in 0..d {
            let base = (t * d + c) * k;
            let gout = &g.data()[at(t, c)..at(t, c) + n];
            let h_t: Vec<f64> = h.data()[at(t, c)..at(t, c) + n].to_vec();
            let mut gh_t = vec![0.0; n];
            for j in 0..k {
                let p = trace.positions[base + j];
                let cj = trace.coeffs[base + j];
                let (lo, hi, f) = stencil(p, len);
                let (hlo, hhi) = (at(lo, c), at(hi, c));
                let mut dot = 0.0;
                let mut slope = 0.0;
                for s in 0..n {
                    let v = if f == 0.0 {
                        h.data()[hlo + s]
                    } else {
                        (1.0 - f) * h.data()[hlo + s] + f * h.data()[hhi + s]
                    };
                    dot += gout[s] * v;
                    gh[hlo + s] += cj * (1.0 - f) * gout[s];
                    if f != 0.0 {
                        gh[hhi + s] += cj * f * gout[s];
                    }
                }
                gc[j] = dot;
                if cfg.mode == SelectionMode::Learnable {
                    let upper = if f != 0.0 { hi } else { lo + 1 };
                    if upper < len {
                        let hup = at(upper, c);
                        for s in 0..n {
                            slope += (h.data()[hup + s] - h.data()[hlo + s]) * gout[s];
                        }
                    }
                    let sg = sigmoid(trace.raw[base + j]);
                    let gr = cj * slope * sg * (1.0 - sg) * position_scale(t, len, cfg.causal);
                    let row = rows.start + j;
                    for s in 0..n {
                        gpw.data_mut()[row * n + s] += gr * h_t[s];
                        gh_t[s] += gr * params.pos_w.data()[row * n + s];
                    }
                    gpb.data_mut()[row] += gr;
                }
            }
            let cs = &trace.coeffs[base..base + k];
            let mix: f64 = (0..k).map(|j| cs[j] * gc[j]).sum();
            for j in 0..k {
                let gz = cs[j] * (gc[j] - mix);
                let row = rows.start + j;
                match (&mut gcoef, &params.coeffs) {
                    (Coefficients::Predicted { w: gw, b: gb }, Coefficients::Predicted { w, .. }) => {
                        for s in 0..n {
                            gw.data_mut()[row * n + s] += gz * h_t[s];
                            gh_t[s] += gz * w.data()[row * n + s];
                        }
                        gb.data_mut()[row] += gz;
                    }
                    (Coefficients::Shared(gt), _) => gt.data_mut()[route * k + j] += gz,
                    _ => unreachable!("gradient layout mirrors parameters"),
                }
            }
            for s in 0..n {
                gh[at(t, c) + s] += gh_t[s];
            }
        }
    }
    Ok(RetainGrads {
        h: Tensor::from_parts(h.shape().to_vec(), gh),
        pos_w: gpw,
        pos_b: gpb,
        coeffs: gcoef,
    })
}

/// Softmax cross-entropy of `logits[C]` against `label`; returns
/// `ḡ_logits` scaled by the upstream scalar `g`.
pub fn vjp_cross_entropy(logits: &Tensor, label: usize, g: f64) -> Tensor {
    let p = crate::adaptor_t::softmax_slice(logits.data());
    Tensor::from_fn(logits.shape(), |i| {
        g * (p[i] - if i == label { 1.0 } else { 0.0 })
    })
}
