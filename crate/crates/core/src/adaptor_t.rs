//! Temporal memory retention over a hidden-state sequence.
//!
//! For every step `t` (and every channel, when the sequence is `[L×D×N]`)
//! a linear layer on `h_t` predicts `K` real positions and `K` coefficient
//! logits. The positions are mapped into the accessible range, the hidden
//! states there are sampled by linear interpolation, and their
//! softmax-weighted sum is added to `h_t`:
//!
//! ```text
//! h'_t = h_t + Σ_k c_k · h(p_k)
//! ```
//!
//! One parameter set serves `S` scan sequences; sequence `s` uses rows
//! `s·K .. (s+1)·K` of each predictor.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Learnable,
    /// Fixed negative offsets relative to `t`.
    Static,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(SelectionMode::Learnable),
            "static" => Ok(SelectionMode::Static),
            other => Err(Error::Config(format!("unknown adaptor_t mode `{other}`"))),
        }
    }
}

pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorTConfig {
    pub k: usize,
    pub sequences: usize,
    pub mode: SelectionMode,
    pub causal: bool,
    /// Replace the coefficient predictor with one `[S×K]` logit table.
    pub weight_sharing: bool,
    pub static_offsets: Vec<i64>,
}

impl AdaptorTConfig {
    pub fn new(k: usize, sequences: usize) -> Self {
        Self {
            k,
            sequences,
            mode: SelectionMode::Learnable,
            causal: true,
            weight_sharing: false,
            static_offsets: default_offsets(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.sequences == 0 {
            return Err(Error::Config("adaptor_t needs k ≥ 1 and S ≥ 1".into()));
        }
        if self.mode == SelectionMode::Static {
            if self.static_offsets.len() != self.k {
                return Err(Error::Config(format!(
                    "adaptor_t static mode needs {} offsets, got {}",
                    self.k,
                    self.static_offsets.len()
                )));
            }
            if self.static_offsets.iter().any(|&o| o >= 0) {
                return Err(Error::Config(
                    "adaptor_t static offsets must be negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `−1, −2, −4, …`: one step back, then doubling.
pub fn default_offsets(k: usize) -> Vec<i64> {
    (0..k).map(|i| -(1i64 << i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Coefficients {
    /// `w: [K·S × N]`, `b: [K·S]`
    Predicted { w: Tensor, b: Tensor },
    /// `[S×K]` logits shared across every position.
    Shared(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorTParams {
    pub config: AdaptorTConfig,
    /// `[K·S × N]`
    pub pos_w: Tensor,
    /// `[K·S]`
    pub pos_b: Tensor,
    pub coeffs: Coefficients,
}

impl AdaptorTParams {
    /// All predictor weights zero: positions start mid-range and
    /// coefficients uniform.
    pub fn zeros(config: AdaptorTConfig, state: usize) -> Result<Self> {
        config.validate()?;
        let rows = config.k * config.sequences;
        let coeffs = if config.weight_sharing {
            Coefficients::Shared(Tensor::zeros(&[config.sequences, config.k]))
        } else {
            Coefficients::Predicted {
                w: Tensor::zeros(&[rows, state]),
                b: Tensor::zeros(&[rows]),
            }
        };
        Ok(Self {
            pos_w: Tensor::zeros(&[rows, state]),
            pos_b: Tensor::zeros(&[rows]),
            coeffs,
            config,
        })
    }

    pub fn validate(&self, state: usize) -> Result<()> {
        self.config.validate()?;
        let rows = self.config.k * self.config.sequences;
        let coeff_ok = match &self.coeffs {
            Coefficients::Predicted { w, b } => {
                !self.config.weight_sharing && w.shape() == [rows, state] && b.len() == rows
            }
            Coefficients::Shared(t) => {
                self.config.weight_sharing && t.shape() == [self.config.sequences, self.config.k]
            }
        };
        if self.pos_w.shape() != [rows, state] || self.pos_b.len() != rows || !coeff_ok {
            return Err(Error::shape(
                "AdaptorTParams",
                format!(
                    "K={} S={} N={state}: pos_w{:?} pos_b{:?}",
                    self.config.k,
                    self.config.sequences,
                    self.pos_w.shape(),
                    self.pos_b.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let coeff = match &self.coeffs {
            Coefficients::Predicted { w, b } => w.len() + b.len(),
            Coefficients::Shared(t) => t.len(),
        };
        self.pos_w.len() + self.pos_b.len() + coeff
    }
}

/// Upper end of the position range at step `t` of `len`.
#[inline]
pub(crate) fn position_scale(t: usize, len: usize, causal: bool) -> f64 {
    if causal {
        t as f64
    } else {
        (len - 1) as f64
    }
}

/// Maps raw logits to positions: `σ(r)·t` when causal, else `σ(r)·(L−1)`.
pub fn positions_from_logits(raw: &[f64], t: usize, len: usize, causal: bool) -> Vec<f64> {
    let scale = position_scale(t, len, causal);
    raw.iter().map(|&r| sigmoid(r) * scale).collect()
}

pub(crate) fn linear_rows(w: &Tensor, b: &Tensor, rows: std::ops::Range<usize>, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    rows.map(|r| {
        let wrow = &w.data()[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += wrow[j] * x[j];
        }
        acc + b.data()[r]
    })
    .collect()
}

pub(crate) fn route_rows(cfg: &AdaptorTConfig, route: usize) -> std::ops::Range<usize> {
    route * cfg.k..(route + 1) * cfg.k
}

/// Positions for `h_t` in sequence `route` (learnable mode).
pub fn predict_positions(
    h_t: &[f64],
    params: &AdaptorTParams,
    route: usize,
    t: usize,
    len: usize,
) -> Vec<f64> {
    let raw = linear_rows(&params.pos_w, &params.pos_b, route_rows(&params.config, route), h_t);
    positions_from_logits(&raw, t, len, params.config.causal)
}

pub(crate) fn coeff_logits(h_t: &[f64], params: &AdaptorTParams, route: usize) -> Vec<f64> {
    let k = params.config.k;
    match &params.coeffs {
        Coefficients::Predicted { w, b } => {
            linear_rows(w, b, route_rows(&params.config, route), h_t)
        }
        Coefficients::Shared(t) => t.data()[route * k..(route + 1) * k].to_vec(),
    }
}

pub(crate) fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Softmax-normalized coefficients for `h_t` in sequence `route`.
pub fn predict_coeffs(h_t: &[f64], params: &AdaptorTParams, route: usize) -> Vec<f64> {
    softmax_slice(&coeff_logits(h_t, params, route))
}

/// Interpolation stencil for position `p` in a sequence of `len`:
/// `(lower index, upper index, upper weight)`. Positions are clamped to
/// `[0, len−1]`; integral positions get upper weight exactly zero.
#[inline]
pub(crate) fn stencil(p: f64, len: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (len - 1) as f64);
    let lo = p.floor() as usize;
    let frac = p - lo as f64;
    if frac == 0.0 || lo + 1 >= len {
        (lo, lo, 0.0)
    } else {
        (lo, lo + 1, frac)
    }
}

/// Linear interpolation of a `[L×N]` hidden-state sequence at real
/// position `p` (clamped to `[0, L−1]`).
pub fn sample_state(h_seq: &Tensor, p: f64) -> Result<Tensor> {
    let &[len, n] = h_seq.shape() else {
        return Err(Error::shape(
            "sample_state",
            format!("expected [L×N], got {:?}", h_seq.shape()),
        ));
    };
    if !p.is_finite() {
        return Err(Error::Domain(format!("sample position {p} is not finite")));
    }
    let (lo, hi, f) = stencil(p, len);
    let row = |i: usize| &h_seq.data()[i * n..(i + 1) * n];
    let out: Vec<f64> = if f == 0.0 {
        row(lo).to_vec()
    } else {
        row(lo)
            .iter()
            .zip(row(hi))
            .map(|(a, b)| (1.0 - f) * a + f * b)
            .collect()
    };
    Ok(Tensor::from_parts(vec![n], out))
}

/// Intermediate values of one `retain` call, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct RetainTrace {
    /// `[L·D·K]` raw position logits (learnable mode only).
    pub raw: Vec<f64>,
    /// `[L·D·K]` positions actually sampled.
    pub positions: Vec<f64>,
    /// `[L·D·K]` softmax coefficients.
    pub coeffs: Vec<f64>,
}

/// Views `h` as `(L, D, N)`; `[L×N]` inputs are a single channel.
pub(crate) fn seq_dims(h: &Tensor) -> Result<(usize, usize, usize)> {
    match *h.shape() {
        [l, n] => Ok((l, 1, n)),
        [l, d, n] => Ok((l, d, n)),
        ref s => Err(Error::shape(
            "retain",
            format!("expected [L×N] or [L×D×N], got {s:?}"),
        )),
    }
}

pub fn retain(h: &Tensor, params: &AdaptorTParams, route: usize) -> Result<Tensor> {
    retain_traced(h, params, route).map(|(out, _)| out)
}

/// `retain` plus the intermediate positions and coefficients.
pub fn retain_traced(
    h: &Tensor,
    params: &AdaptorTParams,
    route: usize,
) -> Result<(Tensor, RetainTrace)> {
    let (len, d, n) = seq_dims(h)?;
    params.validate(n)?;
    let cfg = &params.config;
    if route >= cfg.sequences {
        return Err(Error::Contract(format!(
            "route index {route} out of range for S = {}",
            cfg.sequences
        )));
    }
    let k = cfg.k;
    let at = |t: usize, c: usize| (t * d + c) * n;
    let mut out = h.data().to_vec();
    let mut trace = RetainTrace {
        raw: vec![0.0; len * d * k],
        positions: vec![0.0; len * d * k],
        coeffs: vec![0.0; len * d * k],
    };
    for t in 0..len {
        for c in 0..d {
            let h_t = &h.data()[at(t, c)..at(t, c) + n];
            let base = (t * d + c) * k;
            match cfg.mode {
                SelectionMode::Learnable => {
                    let raw = linear_rows(&params.pos_w, &params.pos_b, route_rows(cfg, route), h_t);
                    let pos = positions_from_logits(&raw, t, len, cfg.causal);
                    trace.raw[base..base + k].copy_from_slice(&raw);
                    trace.positions[base..base + k].copy_from_slice(&pos);
                }
                SelectionMode::Static => {
                    for (j, &off) in cfg.static_offsets.iter().enumerate() {
                        trace.positions[base + j] = (t as i64 + off).clamp(0, t as i64) as f64;
                    }
                }
            }
            let coeffs = predict_coeffs(h_t, params, route);
            trace.coeffs[base..base + k].copy_from_slice(&coeffs);

            let dst = at(t, c);
            for j in 0..k {
                let (lo, hi, f) = stencil(trace.positions[base + j], len);
                let cj = coeffs[j];
                for s in 0..n {
                    let v = if f == 0.0 {
                        h.data()[at(lo, c) + s]
                    } else {
                        (1.0 - f) * h.data()[at(lo, c) + s] + f * h.data()[at(hi, c) + s]
                    };
                    out[dst + s] += cj * v;
                }
            }
        }
    }
    let out = Tensor::from_parts(h.shape().to_vec(), out).checked("retain")?;
    Ok((out, trace))
}
