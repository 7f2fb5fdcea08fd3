use std::sync::Arc;

use super::config::{AdaptorInit, BlockConfig, Insertion};
use crate::adaptor_s::{Combine, Kernel, KernelBank};
use crate::adaptor_t::{AdaptorTParams, Coefficients, SelectionMode};
use crate::error::{Error, Result};
use crate::grad::{CoeffVars, ParamGroup, ParamId, ParamStore, RetainVars, Tape, Var};
use crate::rng::SplitMix64;
use crate::routes::{build_route, MergeRule, ScanRoute};
use crate::ssm::{ContinuousSsm, DELTA_BIAS_INIT};
use crate::tensor::{Tensor, Unary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffIds {
    Predicted { w: ParamId, b: ParamId },
    Shared(ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptorTIds {
    /// Absent in static mode.
    pub pos: Option<(ParamId, ParamId)>,
    pub coeffs: CoeffIds,
}

/// Where each of a block's parameters lives in its [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub a_log: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub delta_proj: ParamId,
    pub delta_bias: ParamId,
    pub d_skip: ParamId,
    pub adaptor_t: Option<AdaptorTIds>,
    pub adaptor_s: Vec<ParamId>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

/// Position-logit biases placing the K samples at fractions
/// `(j + ½)/K` of the available past.
pub fn spread_position_bias(k: usize, sequences: usize) -> Tensor {
    Tensor::from_fn(&[k * sequences], |i| {
        let f = ((i % k) as f64 + 0.5) / k as f64;
        (f / (1.0 - f)).ln()
    })
}

/// Registers a block's parameters under `prefix` and returns their ids.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut SplitMix64,
) -> Result<BlockIds> {
    cfg.validate()?;
    let (d, n) = (cfg.dim, cfg.state);
    let name = |s: &str| format!("{prefix}{s}");
    let bb = ParamGroup::Backbone;
    let ssm = ContinuousSsm::init(d, n, cfg.per_channel_c, rng);
    let ln1_g = store.add(name("ln1.g"), Tensor::ones(&[d]), bb);
    let ln1_b = store.add(name("ln1.b"), Tensor::zeros(&[d]), bb);
    let a_log = store.add(name("ssm.a_log"), ssm.a().map(|a| (-a).ln()), bb);
    let b_proj = store.add(name("ssm.b_proj"), ssm.b_proj().clone(), bb);
    let c_proj = store.add(name("ssm.c_proj"), ssm.c_proj().clone(), bb);
    let delta_proj = store.add(name("ssm.delta_proj"), ssm.delta_proj().clone(), bb);
    let delta_bias = store.add(name("ssm.delta_bias"), Tensor::full(&[d], DELTA_BIAS_INIT), bb);
    let d_skip = store.add(name("ssm.d_skip"), ssm.d_skip().clone(), bb);

    let random = cfg.adaptor_init == AdaptorInit::Random;
    let adaptor_t = match &cfg.adaptor_t {
        None => None,
        Some(spec) => {
            let tcfg = spec.to_config(cfg.routes.len());
            let rows = tcfg.k * tcfg.sequences;
            let g = ParamGroup::AdaptorT;
            let bound = 1.0 / (n as f64).sqrt();
            let pos = if tcfg.mode == SelectionMode::Learnable {
                let w = if random { uniform(&[rows, n], bound, rng) } else { Tensor::zeros(&[rows, n]) };
                let pw = store.add(name("adaptor_t.pos_w"), w, g);
                let pb = store.add(name("adaptor_t.pos_b"), spread_position_bias(tcfg.k, tcfg.sequences), g);
                Some((pw, pb))
            } else {
                None
            };
            let coeffs = if tcfg.weight_sharing {
                let t = if random {
                    uniform(&[tcfg.sequences, tcfg.k], 1.0, rng)
                } else {
                    Tensor::zeros(&[tcfg.sequences, tcfg.k])
                };
                CoeffIds::Shared(store.add(name("adaptor_t.coef"), t, g))
            } else {
                let w = if random { uniform(&[rows, n], bound, rng) } else { Tensor::zeros(&[rows, n]) };
                CoeffIds::Predicted {
                    w: store.add(name("adaptor_t.coef_w"), w, g),
                    b: store.add(name("adaptor_t.coef_b"), Tensor::zeros(&[rows]), g),
                }
            };
            Some(AdaptorTIds { pos, coeffs })
        }
    };

    let mut adaptor_s = Vec::new();
    if let Some(spec) = &cfg.adaptor_s {
        let bank = if random {
            KernelBank::kaiming(d, &spec.scales, spec.combine, false, rng)?
        } else {
            KernelBank::zeros(d, &spec.scales, spec.combine, false)?
        };
        for (i, k) in bank.kernels.into_iter().enumerate() {
            adaptor_s.push(store.add(name(&format!("adaptor_s.k{i}")), k.weights, ParamGroup::AdaptorS));
        }
    }

    let hidden = cfg.ffn_ratio * d;
    let ln2_g = store.add(name("ln2.g"), Tensor::ones(&[d]), bb);
    let ln2_b = store.add(name("ln2.b"), Tensor::zeros(&[d]), bb);
    let w1 = store.add(name("ffn.w1"), uniform(&[hidden, d], 1.0 / (d as f64).sqrt(), rng), bb);
    let b1 = store.add(name("ffn.b1"), Tensor::zeros(&[hidden]), bb);
    let w2 = store.add(name("ffn.w2"), uniform(&[d, hidden], 1.0 / (hidden as f64).sqrt(), rng), bb);
    let b2 = store.add(name("ffn.b2"), Tensor::zeros(&[d]), bb);
    Ok(BlockIds {
        ln1_g,
        ln1_b,
        a_log,
        b_proj,
        c_proj,
        delta_proj,
        delta_bias,
        d_skip,
        adaptor_t,
        adaptor_s,
        ln2_g,
        ln2_b,
        w1,
        b1,
        w2,
        b2,
    })
}

/// Flat gather index turning `x[H×W×D]` into the route's `[L×D]` sequence
/// (`forward`) or back onto the grid.
fn route_index(route: &ScanRoute, d: usize, forward: bool) -> Arc<[usize]> {
    let map = if forward { route.perm() } else { route.inv() };
    map.iter()
        .flat_map(|&src| (0..d).map(move |c| src * d + c))
        .collect()
}

fn merge(tape: &mut Tape, parts: Vec<Var>, rule: MergeRule) -> Result<Var> {
    let count = parts.len();
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Contract("merge needs at least one route".into()))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    if rule == MergeRule::Mean && count > 1 {
        acc = tape.scale(acc, 1.0 / count as f64)?;
    }
    Ok(acc)
}

/// Multi-scale depthwise aggregation on the tape.
fn aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    y: Var,
    kernels: &[ParamId],
    cfg: &BlockConfig,
) -> Result<Var> {
    let spec = cfg.adaptor_s.as_ref().expect("kernels imply a spec");
    let mut parts = Vec::with_capacity(kernels.len());
    for (&id, sc) in kernels.iter().zip(&spec.scales) {
        let w = tape.param(store, id);
        parts.push(tape.depthwise_conv(y, w, sc.dilation)?);
    }
    let rule = match spec.combine {
        Combine::Sum => MergeRule::Sum,
        Combine::Mean => MergeRule::Mean,
    };
    let acc = merge(tape, parts, rule)?;
    if cfg.s_residual() {
        tape.add(y, acc)
    } else {
        Ok(acc)
    }
}

fn retain_vars(tape: &mut Tape, store: &ParamStore, ids: &AdaptorTIds, rows: usize, n: usize) -> RetainVars {
    let (pos_w, pos_b) = match ids.pos {
        Some((w, b)) => (tape.param(store, w), tape.param(store, b)),
        None => (tape.leaf(Tensor::zeros(&[rows, n])), tape.leaf(Tensor::zeros(&[rows]))),
    };
    let coeffs = match ids.coeffs {
        CoeffIds::Predicted { w, b } => CoeffVars::Predicted {
            w: tape.param(store, w),
            b: tape.param(store, b),
        },
        CoeffIds::Shared(t) => CoeffVars::Shared(tape.param(store, t)),
    };
    RetainVars { pos_w, pos_b, coeffs }
}

/// SS2D on the tape: every route flattens `x[H×W×D]`, runs the selective
/// scan through the two-phase solver and is restored to the grid before
/// the routes are merged.
pub fn ss2d_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BlockConfig,
    ids: &BlockIds,
    x: Var,
) -> Result<Var> {
    let &[h, w, d] = tape.value(x).shape() else {
        return Err(Error::shape("ss2d_forward", format!("{:?}", tape.value(x).shape())));
    };
    if d != cfg.dim {
        return Err(Error::shape(
            "ss2d_forward",
            format!("{d} channels for a block of dim {}", cfg.dim),
        ));
    }
    let n = cfg.state;
    let l = h * w;
    let a_log = tape.param(store, ids.a_log);
    let a_exp = tape.unary(Unary::Exp, a_log)?;
    let a = tape.scale(a_exp, -1.0)?;
    let b_proj = tape.param(store, ids.b_proj);
    let c_proj = tape.param(store, ids.c_proj);
    let delta_proj = tape.param(store, ids.delta_proj);
    let delta_bias = tape.param(store, ids.delta_bias);
    let d_skip = tape.param(store, ids.d_skip);
    let tcfg = cfg.adaptor_t.as_ref().map(|s| s.to_config(cfg.routes.len()));
    let tvars = match (&ids.adaptor_t, &tcfg) {
        (Some(tids), Some(tc)) => Some(retain_vars(tape, store, tids, tc.k * tc.sequences, n)),
        _ => None,
    };
    let zero_skip = match cfg.insertion {
        Insertion::Parallel => Some(tape.leaf(Tensor::zeros(&[d]))),
        _ => None,
    };

    let mut base = Vec::with_capacity(cfg.routes.len());
    let mut branch = Vec::new();
    for (r, &kind) in cfg.routes.iter().enumerate() {
        let route = build_route(kind, h, w)?;
        let u = tape.gather(x, route_index(&route, d, true), &[l, d])?;
        let bsel = tape.linear(u, b_proj, None)?;
        let mut csel = tape.linear(u, c_proj, None)?;
        if cfg.per_channel_c {
            csel = tape.reshape(csel, &[l, d, n])?;
        }
        let pre = tape.linear(u, delta_proj, Some(delta_bias))?;
        let delta = tape.unary(Unary::Softplus, pre)?;
        let abar = tape.zoh_decay(delta, a)?;
        let bu = tape.zoh_forcing(delta, a, bsel, u, cfg.discretization)?;
        // phase 1: raw hidden states
        let hs = tape.scan(abar, bu)?;
        let back = route_index(&route, d, false);
        match cfg.insertion {
            Insertion::Sequential => {
                let hs = match (&tvars, &tcfg) {
                    (Some(v), Some(tc)) => tape.retain(hs, *v, tc, r)?,
                    _ => hs,
                };
                let y = tape.output_project(hs, csel, d_skip, u)?;
                let mut y2 = tape.gather(y, back, &[h, w, d])?;
                if !ids.adaptor_s.is_empty() {
                    y2 = aggregate(tape, store, y2, &ids.adaptor_s, cfg)?;
                }
                base.push(y2);
            }
            Insertion::Parallel => {
                let y = tape.output_project(hs, csel, d_skip, u)?;
                base.push(tape.gather(y, back.clone(), &[h, w, d])?);
                let ht = match (&tvars, &tcfg) {
                    (Some(v), Some(tc)) => tape.retain(hs, *v, tc, r)?,
                    _ => hs,
                };
                let z = tape.output_project(ht, csel, zero_skip.expect("parallel"), u)?;
                branch.push(tape.gather(z, back, &[h, w, d])?);
            }
            Insertion::None => {
                let y = tape.output_project(hs, csel, d_skip, u)?;
                base.push(tape.gather(y, back, &[h, w, d])?);
            }
        }
    }
    let out = merge(tape, base, cfg.merge)?;
    if cfg.insertion == Insertion::Parallel {
        let z = merge(tape, branch, cfg.merge)?;
        let side = aggregate(tape, store, z, &ids.adaptor_s, cfg)?;
        return tape.add(out, side);
    }
    Ok(out)
}

/// `y = x + SS2D(LN x)`, `out = y + FFN(LN y)`.
pub fn block_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BlockConfig,
    ids: &BlockIds,
    x: Var,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let [h, w, d] = shape[..] else {
        return Err(Error::shape("block_forward", format!("{shape:?}")));
    };
    let g1 = tape.param(store, ids.ln1_g);
    let b1 = tape.param(store, ids.ln1_b);
    let xn = tape.layer_norm(x, g1, b1, cfg.norm_eps)?;
    let s = ss2d_tape(tape, store, cfg, ids, xn)?;
    let y = tape.add(x, s)?;
    let g2 = tape.param(store, ids.ln2_g);
    let b2 = tape.param(store, ids.ln2_b);
    let yn = tape.layer_norm(y, g2, b2, cfg.norm_eps)?;
    let rows = tape.reshape(yn, &[h * w, d])?;
    let (w1, bb1) = (tape.param(store, ids.w1), tape.param(store, ids.b1));
    let hid = tape.linear(rows, w1, Some(bb1))?;
    let act = tape.unary(Unary::Gelu, hid)?;
    let (w2, bb2) = (tape.param(store, ids.w2), tape.param(store, ids.b2));
    let f = tape.linear(act, w2, Some(bb2))?;
    let f = tape.reshape(f, &[h, w, d])?;
    tape.add(y, f)
}

/// A standalone block owning its parameters.
#[derive(Clone, Debug)]
pub struct Block {
    pub config: BlockConfig,
    pub store: ParamStore,
    pub ids: BlockIds,
}

impl Block {
    pub fn new(config: BlockConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut store = ParamStore::new();
        let ids = init_block(&mut store, "", &config, rng)?;
        Ok(Self { config, store, ids })
    }

    /// The continuous SSM currently held in the store.
    pub fn ssm(&self) -> Result<ContinuousSsm> {
        let v = |id| self.store.value(id).clone();
        ContinuousSsm::new(
            v(self.ids.a_log).map(|x| -x.exp()),
            v(self.ids.b_proj),
            v(self.ids.c_proj),
            v(self.ids.delta_proj),
            v(self.ids.delta_bias),
            v(self.ids.d_skip),
            self.config.per_channel_c,
        )
    }

    pub fn adaptor_t_params(&self) -> Option<AdaptorTParams> {
        let spec = self.config.adaptor_t.as_ref()?;
        let ids = self.ids.adaptor_t?;
        let tc = spec.to_config(self.config.routes.len());
        let rows = tc.k * tc.sequences;
        let n = self.config.state;
        let (pos_w, pos_b) = match ids.pos {
            Some((w, b)) => (self.store.value(w).clone(), self.store.value(b).clone()),
            None => (Tensor::zeros(&[rows, n]), Tensor::zeros(&[rows])),
        };
        let coeffs = match ids.coeffs {
            CoeffIds::Predicted { w, b } => Coefficients::Predicted {
                w: self.store.value(w).clone(),
                b: self.store.value(b).clone(),
            },
            CoeffIds::Shared(t) => Coefficients::Shared(self.store.value(t).clone()),
        };
        Some(AdaptorTParams {
            config: tc,
            pos_w,
            pos_b,
            coeffs,
        })
    }

    pub fn kernel_bank(&self) -> Option<KernelBank> {
        let spec = self.config.adaptor_s.as_ref()?;
        Some(KernelBank {
            kernels: self
                .ids
                .adaptor_s
                .iter()
                .zip(&spec.scales)
                .map(|(&id, s)| Kernel {
                    weights: self.store.value(id).clone(),
                    dilation: s.dilation,
                })
                .collect(),
            combine: spec.combine,
            residual: self.config.s_residual(),
        })
    }

    /// Sets every adaptor parameter to its zero initialization.
    pub fn zero_adaptors(&mut self) {
        let zero = Block::new(
            BlockConfig {
                adaptor_init: AdaptorInit::Zero,
                ..self.config.clone()
            },
            &mut SplitMix64::new(0),
        )
        .expect("config already validated");
        for id in self.store.ids().collect::<Vec<_>>() {
            if self.store.get(id).group.is_adaptor() {
                self.store.get_mut(id).value = zero.store.value(id).clone();
            }
        }
    }
}

fn run_pure(x2d: &Tensor, block: &Block, full: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(x2d.clone());
    let y = if full {
        block_tape(&mut tape, &block.store, &block.config, &block.ids, x)?
    } else {
        ss2d_tape(&mut tape, &block.store, &block.config, &block.ids, x)?
    };
    Ok(tape.value(y).clone())
}

pub fn ss2d_forward(x2d: &Tensor, block: &Block) -> Result<Tensor> {
    run_pure(x2d, block, false)
}

pub fn block_forward(x2d: &Tensor, block: &Block) -> Result<Tensor> {
    run_pure(x2d, block, true)
}

/// Rewires `cfg` to insert its adaptors in `form`. Adaptors that `form`
/// cannot host are dropped; none are added.
pub fn insert_adaptor(cfg: &BlockConfig, form: Insertion) -> Result<BlockConfig> {
    if !cfg.has_adaptors() {
        return Err(Error::Config("no adaptors configured to insert".into()));
    }
    let mut out = cfg.clone();
    out.insertion = form;
    if form == Insertion::None {
        out.adaptor_t = None;
        out.adaptor_s = None;
    }
    if let Some(s) = out.adaptor_s.as_mut() {
        s.residual = None;
    }
    out.validate()?;
    Ok(out)
}
