//! Dense row-major tensors and the handful of kernels everything else is
//! built from.
//!
//! Storage is a flat `Vec<f64>` plus an explicit shape. There are no views;
//! every operation allocates its output. Reductions always run in index
//! order so results are bit-reproducible.

use std::fmt;

use crate::error::{Error, Result};

/// Storage precision for dumps and benchmarks. Arithmetic is always f64;
/// `F32` rounds values through `f32` where a caller asks for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype_byte(self) -> u8 {
        match self {
            Precision::F32 => 0x04,
            Precision::F64 => 0x08,
        }
    }

    pub fn from_dtype_byte(b: u8) -> Option<Self> {
        match b {
            0x04 => Some(Precision::F32),
            0x08 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernels whose output shape is correct by
    /// construction. Finiteness is still checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, &ix) in index.iter().enumerate().rev() {
            debug_assert!(ix < self.shape[i]);
            off += ix * stride;
            stride *= self.shape[i];
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Tensor> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Norm-wise relative deviation `max|a - b| / max|b|` (∞-norm), with
    /// `b` the reference. Zero when both are identically zero.
    pub fn rel_dev(&self, reference: &Tensor) -> f64 {
        let num = self.max_abs_diff(reference);
        let den = reference.max_abs();
        if num == 0.0 {
            0.0
        } else {
            num / den.max(f64::MIN_POSITIVE)
        }
    }

    /// Round every value through f32.
    pub fn round_to(&self, precision: Precision) -> Tensor {
        match precision {
            Precision::F64 => self.clone(),
            Precision::F32 => self.map(|v| v as f32 as f64),
        }
    }

    /// Gather along the leading axis: `out[i] = self[rows[i]]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let inner = self.len() / n;
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {r} out of range for {n}"),
                ));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }
}

/// `a[M×K] · b[K×N]`, summing over K in index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out).checked("matmul")
}

/// `x[M×K] · w[N×K]ᵀ (+ bias[N])`: the linear-layer form.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, &w.transpose()?)?;
    if let Some(b) = bias {
        y = add_row_bias(&y, b)?;
    }
    Ok(y)
}

/// Adds `bias[C]` to every row of `x[…×C]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape.last().unwrap();
    if bias.len() != c {
        return Err(Error::shape(
            "add_row_bias",
            format!("{:?} + bias{:?}", x.shape, bias.shape),
        ));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out.checked("add_row_bias")
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let (outer, k, inner) = axis_blocks(&x.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * k + j) * inner + i;
            let max = (0..k).fold(f64::NEG_INFINITY, |m, j| m.max(x.data[idx(j)]));
            let mut total = 0.0;
            for j in 0..k {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..k {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out).checked("softmax")
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().unwrap();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("{:?} with gain{:?} bias{:?}", x.shape, gain.shape, bias.shape),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Tensor::from_parts(x.shape.clone(), out).checked("layer_norm")
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx gelu(x) = Φ(x) + x φ(x).
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Unary {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Scale(s) => s * x,
        }
    }

    /// Derivative at `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Scale(s) => s,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Scale(_) => "scale",
        }
    }
}

pub fn unary(x: &Tensor, op: Unary) -> Result<Tensor> {
    x.map(|v| op.apply(v)).checked(op.name())
}

impl Binary {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

/// Elementwise binary op. Shapes must match exactly, or one side must be
/// a single-element scalar tensor.
pub fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    let data: Vec<f64> = if a.shape == b.shape {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect()
    } else if b.len() == 1 {
        let y = b.data[0];
        a.data.iter().map(|&x| op.apply(x, y)).collect()
    } else if a.len() == 1 {
        let x = a.data[0];
        b.data.iter().map(|&y| op.apply(x, y)).collect()
    } else {
        return Err(Error::shape(
            "elementwise",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    };
    let shape = if a.len() >= b.len() { a.shape.clone() } else { b.shape.clone() };
    Tensor::from_parts(shape, data).checked("elementwise")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, Binary::Add)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, Binary::Mul)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    unary(a, Unary::Scale(s))
}
