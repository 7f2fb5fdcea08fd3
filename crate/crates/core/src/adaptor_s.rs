//! Multi-scale spatial aggregation: a bank of dilated depthwise
//! convolutions over the grid-restored SSM output.
//!
//! Kernels are applied as cross-correlation (no flip) with zero padding and
//! "same" output size. Tap `(a, b)` of a `K_h×K_w` kernel with dilation `d`
//! reads `y[i + d(a − K_h/2), j + d(b − K_w/2)]`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Sum,
    Mean,
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Combine::Sum),
            "mean" => Ok(Combine::Mean),
            other => Err(Error::Config(format!("unknown combine rule `{other}`"))),
        }
    }
}

/// One kernel scale: square `size×size` taps spaced `dilation` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub size: usize,
    pub dilation: usize,
}

impl Scale {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel extent must be odd, got {}",
                self.size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// {3×3 dilation 1, 3×3 dilation 2}.
pub fn default_scales() -> Vec<Scale> {
    vec![
        Scale { size: 3, dilation: 1 },
        Scale { size: 3, dilation: 2 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    /// `[D×K_h×K_w]`
    pub weights: Tensor,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub kernels: Vec<Kernel>,
    pub combine: Combine,
    pub residual: bool,
}

impl KernelBank {
    pub fn zeros(channels: usize, scales: &[Scale], combine: Combine, residual: bool) -> Result<Self> {
        let kernels = scales
            .iter()
            .map(|s| {
                s.validate()?;
                Ok(Kernel {
                    weights: Tensor::zeros(&[channels, s.size, s.size]),
                    dilation: s.dilation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernels,
            combine,
            residual,
        })
    }

    /// Kaiming-uniform with `a = √5`: bound `1/√fan_in`, fan_in = K_h·K_w.
    pub fn kaiming(
        channels: usize,
        scales: &[Scale],
        combine: Combine,
        residual: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut bank = Self::zeros(channels, scales, combine, residual)?;
        for k in &mut bank.kernels {
            let fan_in = (k.weights.shape()[1] * k.weights.shape()[2]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in k.weights.data_mut() {
                *v = rng.uniform(-bound, bound);
            }
        }
        Ok(bank)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.iter().map(|k| k.weights.len()).sum()
    }
}

pub(crate) fn check_conv(y: &Tensor, weights: &Tensor, dilation: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (&[h, w, d], &[kd, kh, kw]) = (y.shape(), weights.shape()) else {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("y{:?} with kernel{:?}", y.shape(), weights.shape()),
        ));
    };
    if kd != d {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("{d} channels vs kernel bank for {kd}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel extents must be odd, got {kh}×{kw}"
        )));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be ≥ 1".into()));
    }
    Ok((h, w, d, kh, kw))
}

/// Per-channel 2D cross-correlation of `y[H×W×D]` with `weights[D×K_h×K_w]`.
pub fn depthwise_conv2d(y: &Tensor, weights: &Tensor, dilation: usize) -> Result<Tensor> {
    let (h, w, d, kh, kw) = check_conv(y, weights, dilation)?;
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let dil = dilation as isize;
    let mut out = vec![0.0; y.len()];
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
                        out[o + c] += weights.data()[(c * kh + a) * kw + b] * y.data()[src + c];
                    }
                }
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out).checked("depthwise_conv2d")
}

/// `y' = [y if residual] + combine_d conv(y, w_d, dilation_d)`.
pub fn multi_scale_aggregate(y: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    if bank.kernels.is_empty() {
        return Err(Error::Config("kernel bank is empty".into()));
    }
    let mut acc = depthwise_conv2d(y, &bank.kernels[0].weights, bank.kernels[0].dilation)?;
    for k in &bank.kernels[1..] {
        let part = depthwise_conv2d(y, &k.weights, k.dilation)?;
        for (a, v) in acc.data_mut().iter_mut().zip(part.data()) {
            *a += v;
        }
    }
    if bank.combine == Combine::Mean && bank.kernels.len() > 1 {
        let inv = 1.0 / bank.kernels.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    if bank.residual {
        for (a, v) in acc.data_mut().iter_mut().zip(y.data()) {
            *a = v + *a;
        }
    }
    acc.checked("multi_scale_aggregate")
}
