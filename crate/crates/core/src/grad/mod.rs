//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every method on [`Tape`] runs its forward computation immediately,
//! records what the backward pass needs and returns a [`Var`] handle.
//! [`Tape::backward`] walks the record in exact reverse order.

pub mod checks;
mod fd;
mod optim;
mod store;
pub mod vjp;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use fd::{fd_check, fd_check_with, FdReport, FD_STEP};
pub use optim::{sgd_step, AdamW, AdamWConfig};
pub use store::{Param, ParamGroup, ParamId, ParamStore};

use crate::adaptor_s::depthwise_conv2d;
use crate::adaptor_t::{retain_traced, sample_state, AdaptorTConfig, AdaptorTParams, Coefficients, RetainTrace};
use crate::error::{Error, Result};
use crate::ssm::{decay, forcing, input_gain, output_project, scan_sequential, Discretization};
use crate::tensor::{self, Binary, Tensor, Unary};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on one specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum CoeffVars {
    Predicted { w: Var, b: Var },
    Shared(Var),
}

/// Adaptor-T parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct RetainVars {
    pub pos_w: Var,
    pub pos_b: Var,
    pub coeffs: CoeffVars,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gather(Var, Arc<[usize]>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    ZohDecay { delta: Var, a: Var },
    ZohForcing { delta: Var, a: Var, b: Var, u: Var, rule: Discretization },
    Scan { abar: Var, bu: Var },
    OutputProject { h: Var, c: Var, d: Var, u: Var },
    Retain { h: Var, vars: RetainVars, params: Box<AdaptorTParams>, route: usize, trace: Box<RetainTrace> },
    SampleState { h: Var, p: Var },
    DepthwiseConv { y: Var, w: Var, dilation: usize },
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by the tape's variables.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's accumulators, in tape order.
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, idx) in &self.params {
            if let Some(g) = &self.grads[idx] {
                let p = store.get_mut(id);
                if p.grad.shape() != g.shape() {
                    return Err(Error::Tape(format!("gradient shape mismatch for {}", p.name)));
                }
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.sum()])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} does not belong to this tape",
                v.idx
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// A leaf that receives a gradient but is not a registered parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let v = tensor::add_row_bias(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// `x · wᵀ (+ b)` for `x[M×in]`, `w[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::binary(self.value(a), self.value(b), op)?;
        Ok(self.push(v, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = tensor::unary(self.value(x), op)?;
        Ok(self.push(v, Op::Unary(op, x)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x, axis)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        for v in [x, gain, bias] {
            self.check(v)?;
        }
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices into shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", src.shape()),
            ));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let v = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(v, Op::Gather(x, index)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Mean over the leading axis: `[R×C] → [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let &[r, c] = src.shape() else {
            return Err(Error::shape("mean_rows", format!("{:?}", src.shape())));
        };
        let mut out = vec![0.0; c];
        for row in src.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = Tensor::scalar(compensated_sum(self.value(x).data()));
        Ok(self.push(v, Op::Sum(x)))
    }

    /// `Ā = exp(Δ·A)` as `[L×D×N]` from `Δ[L×D]`, `A[D×N]`.
    pub fn zoh_decay(&mut self, delta: Var, a: Var) -> Result<Var> {
        self.check(delta)?;
        self.check(a)?;
        let (dv, av) = (self.value(delta), self.value(a));
        let (l, d, n) = zoh_dims(dv, av)?;
        let mut out = vec![0.0; l * d * n];
        for t in 0..l {
            for c in 0..d {
                for s in 0..n {
                    out[(t * d + c) * n + s] = decay(dv.data()[t * d + c], av.data()[c * n + s]);
                }
            }
        }
        let v = Tensor::from_parts(vec![l, d, n], out).checked("zoh_decay")?;
        Ok(self.push(v, Op::ZohDecay { delta, a }))
    }

    /// `B̄u` as `[L×D×N]` from `Δ[L×D]`, `A[D×N]`, `B[L×N]`, `u[L×D]`.
    pub fn zoh_forcing(&mut self, delta: Var, a: Var, b: Var, u: Var, rule: Discretization) -> Result<Var> {
        for v in [delta, a, b, u] {
            self.check(v)?;
        }
        let (dv, av, bv, uv) = (self.value(delta), self.value(a), self.value(b), self.value(u));
        let (l, d, n) = zoh_dims(dv, av)?;
        if bv.shape() != [l, n] || uv.shape() != [l, d] {
            return Err(Error::shape(
                "zoh_forcing",
                format!("B{:?} u{:?} for L={l} D={d} N={n}", bv.shape(), uv.shape()),
            ));
        }
        let mut bbar = vec![0.0; l * d * n];
        for t in 0..l {
            for c in 0..d {
                for s in 0..n {
                    bbar[(t * d + c) * n + s] =
                        input_gain(dv.data()[t * d + c], av.data()[c * n + s], bv.data()[t * n + s], rule);
                }
            }
        }
        let v = forcing(&Tensor::from_parts(vec![l, d, n], bbar), uv)?;
        Ok(self.push(v, Op::ZohForcing { delta, a, b, u, rule }))
    }

    pub fn scan(&mut self, abar: Var, bu: Var) -> Result<Var> {
        self.check(abar)?;
        self.check(bu)?;
        let v = scan_sequential(self.value(abar), self.value(bu))?;
        Ok(self.push(v, Op::Scan { abar, bu }))
    }

    pub fn output_project(&mut self, h: Var, c: Var, d: Var, u: Var) -> Result<Var> {
        for v in [h, c, d, u] {
            self.check(v)?;
        }
        let v = output_project(self.value(h), self.value(c), self.value(d), self.value(u))?;
        Ok(self.push(v, Op::OutputProject { h, c, d, u }))
    }

    pub fn retain(&mut self, h: Var, vars: RetainVars, config: &AdaptorTConfig, route: usize) -> Result<Var> {
        self.check(h)?;
        let coeffs = match vars.coeffs {
            CoeffVars::Predicted { w, b } => {
                self.check(w)?;
                self.check(b)?;
                Coefficients::Predicted {
                    w: self.value(w).clone(),
                    b: self.value(b).clone(),
                }
            }
            CoeffVars::Shared(t) => {
                self.check(t)?;
                Coefficients::Shared(self.value(t).clone())
            }
        };
        self.check(vars.pos_w)?;
        self.check(vars.pos_b)?;
        let params = AdaptorTParams {
            config: config.clone(),
            pos_w: self.value(vars.pos_w).clone(),
            pos_b: self.value(vars.pos_b).clone(),
            coeffs,
        };
        let (v, trace) = retain_traced(self.value(h), &params, route)?;
        Ok(self.push(
            v,
            Op::Retain {
                h,
                vars,
                params: Box::new(params),
                route,
                trace: Box::new(trace),
            },
        ))
    }

    /// Interpolated sample of `h[L×N]` at the position held in `p[1]`.
    pub fn sample_state(&mut self, h: Var, p: Var) -> Result<Var> {
        self.check(h)?;
        self.check(p)?;
        if self.value(p).len() != 1 {
            return Err(Error::shape("sample_state", format!("position {:?}", self.value(p).shape())));
        }
        let v = sample_state(self.value(h), self.value(p).item())?;
        Ok(self.push(v, Op::SampleState { h, p }))
    }

    pub fn depthwise_conv(&mut self, y: Var, w: Var, dilation: usize) -> Result<Var> {
        self.check(y)?;
        self.check(w)?;
        let v = depthwise_conv2d(self.value(y), self.value(w), dilation)?;
        Ok(self.push(v, Op::DepthwiseConv { y, w, dilation }))
    }

    /// Softmax cross-entropy of `logits[C]` against class `label`, as `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits);
        if z.rank() != 1 || label >= z.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {label} for logits {:?}", z.shape()),
            ));
        }
        let max = z.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - z.data()[label]).checked("cross_entropy")?;
        Ok(self.push(v, Op::CrossEntropy { logits, label }))
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::ones(self.value(loss).shape()));
        let mut params = Vec::new();
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.idx].value;
            let mut flow: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, i)),
                Op::MatMul(a, b) => {
                    let (ga, gb) = vjp::vjp_matmul(val(*a), val(*b), &g)?;
                    flow.extend([(*a, ga), (*b, gb)]);
                }
                Op::Transpose(a) => flow.push((*a, g.transpose()?)),
                Op::AddBias(x, b) => {
                    let c = val(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    flow.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), gb)));
                    flow.push((*x, g.clone()));
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ga, gb) = match op {
                        Binary::Add => (g.clone(), g.clone()),
                        Binary::Sub => (g.clone(), g.map(|v| -v)),
                        Binary::Mul => (
                            tensor::binary(&g, bv, Binary::Mul)?,
                            tensor::binary(&g, av, Binary::Mul)?,
                        ),
                    };
                    flow.push((*a, reduce_to(ga, av.shape())));
                    flow.push((*b, reduce_to(gb, bv.shape())));
                }
                Op::Unary(op, x) => flow.push((*x, vjp::vjp_unary(val(*x), *op, &g))),
                Op::Softmax(x, axis) => flow.push((*x, vjp::vjp_softmax(&node.value, *axis, &g))),
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (gx, gg, gbias) = vjp::vjp_layer_norm(val(*x), val(*gain), *eps, &g);
                    flow.extend([(*x, gx), (*gain, gg), (*bias, gbias)]);
                }
                Op::Gather(x, index) => {
                    let mut gx = vec![0.0; val(*x).len()];
                    for (k, &src) in index.iter().enumerate() {
                        gx[src] += g.data()[k];
                    }
                    flow.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)));
                }
                Op::Reshape(x) => flow.push((*x, g.reshape(val(*x).shape())?)),
                Op::MeanRows(x) => {
                    let r = val(*x).shape()[0] as f64;
                    let c = g.len();
                    let gx = Tensor::from_fn(val(*x).shape(), |k| g.data()[k % c] / r);
                    flow.push((*x, gx));
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    flow.push((*x, Tensor::full(val(*x).shape(), s)));
                }
                Op::ZohDecay { delta, a } => {
                    let (gd, ga) = vjp::vjp_zoh_decay(val(*delta), val(*a), &g);
                    flow.extend([(*delta, gd), (*a, ga)]);
                }
                Op::ZohForcing { delta, a, b, u, rule } => {
                    let (gd, ga, gb, gu) =
                        vjp::vjp_zoh_forcing(val(*delta), val(*a), val(*b), val(*u), *rule, &g);
                    flow.extend([(*delta, gd), (*a, ga), (*b, gb), (*u, gu)]);
                }
                Op::Scan { abar, bu } => {
                    let (ga, gbu) = vjp::vjp_scan(val(*abar), &node.value, &g);
                    flow.extend([(*abar, ga), (*bu, gbu)]);
                }
                Op::OutputProject { h, c, d, u } => {
                    let (gh, gc, gd, gu) = vjp::vjp_output_project(val(*h), val(*c), val(*d), val(*u), &g);
                    flow.extend([(*h, gh), (*c, gc), (*d, gd), (*u, gu)]);
                }
                Op::Retain { h, vars, params, route, trace } => {
                    let r = vjp::vjp_retain(val(*h), params, *route, trace, &g)?;
                    flow.push((*h, r.h));
                    flow.push((vars.pos_w, r.pos_w));
                    flow.push((vars.pos_b, r.pos_b));
                    match (vars.coeffs, r.coeffs) {
                        (CoeffVars::Predicted { w, b }, Coefficients::Predicted { w: gw, b: gb }) => {
                            flow.extend([(w, gw), (b, gb)]);
                        }
                        (CoeffVars::Shared(t), Coefficients::Shared(gt)) => flow.push((t, gt)),
                        _ => return Err(Error::Tape("retain coefficient layout changed".into())),
                    }
                }
                Op::SampleState { h, p } => {
                    let (gh, gp) = vjp::vjp_sample_state(val(*h), val(*p).data()[0], &g);
                    flow.push((*h, gh));
                    flow.push((*p, Tensor::scalar(gp)));
                }
                Op::DepthwiseConv { y, w, dilation } => {
                    let (gy, gw) = vjp::vjp_depthwise_conv2d(val(*y), val(*w), *dilation, &g)?;
                    flow.extend([(*y, gy), (*w, gw)]);
                }
                Op::CrossEntropy { logits, label } => {
                    flow.push((*logits, vjp::vjp_cross_entropy(val(*logits), *label, g.data()[0])));
                }
            }
            for (v, gv) in flow {
                if v.idx >= i {
                    return Err(Error::Tape("operation refers to a later node".into()));
                }
                accumulate(&mut grads[v.idx], gv);
            }
            grads[i] = Some(g);
        }
        params.reverse();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

/// Neumaier summation; keeps scalar losses accurate to a few ulps.
fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn zoh_dims(delta: &Tensor, a: &Tensor) -> Result<(usize, usize, usize)> {
    match (delta.shape(), a.shape()) {
        (&[l, d], &[d2, n]) if d == d2 => {
            if let Some(&bad) = delta.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("Δ must be positive, got {bad}")));
            }
            Ok((l, d, n))
        }
        (ds, as_) => Err(Error::shape("zoh", format!("Δ{ds:?} A{as_:?}"))),
    }
}

#[cfg(test)]
mod tests;
