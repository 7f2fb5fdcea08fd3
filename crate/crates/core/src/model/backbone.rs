use std::sync::Arc;

use super::block::{block_tape, init_block, BlockIds};
use super::config::{BackboneConfig, BlockConfig};
use crate::error::{Error, Result};
use crate::grad::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Gathers non-overlapping `p×p` patches of `x[H×W×C]` into rows of
/// `[(H/p)(W/p) × p·p·C]`, tap order (row, column, channel).
pub fn patch_index(h: usize, w: usize, c: usize, p: usize) -> Arc<[usize]> {
    let (ph, pw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..ph {
        for j in 0..pw {
            for a in 0..p {
                for b in 0..p {
                    let base = ((i * p + a) * w + j * p + b) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub stages: Vec<Vec<BlockIds>>,
    /// Linear reductions before stages 1..4.
    pub merges: Vec<ParamId>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Four-stage hierarchical classifier.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Template for every block; `dim` is overridden per stage.
    pub block: BlockConfig,
    pub store: ParamStore,
    pub ids: BackboneIds,
}

impl Backbone {
    pub fn new(config: BackboneConfig, block: BlockConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let bb = ParamGroup::Backbone;
        let d0 = config.stage_dims[0];
        let fan = config.patch_size * config.patch_size * config.in_channels;
        let bound = |f: usize| 1.0 / (f as f64).sqrt();
        let patch_w = store.add(
            "patch.w",
            Tensor::from_fn(&[d0, fan], |_| rng.uniform(-bound(fan), bound(fan))),
            bb,
        );
        let patch_b = store.add("patch.b", Tensor::zeros(&[d0]), bb);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (s, (&dim, &depth)) in config.stage_dims.iter().zip(&config.stage_depths).enumerate() {
            if s > 0 {
                let fan = 4 * config.stage_dims[s - 1];
                merges.push(store.add(
                    format!("merge{s}.w"),
                    Tensor::from_fn(&[dim, fan], |_| rng.uniform(-bound(fan), bound(fan))),
                    bb,
                ));
            }
            let cfg = BlockConfig { dim, ..block.clone() };
            let blocks = (0..depth)
                .map(|b| init_block(&mut store, &format!("s{s}.b{b}."), &cfg, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let dl = *config.stage_dims.last().unwrap();
        let norm_g = store.add("norm.g", Tensor::ones(&[dl]), bb);
        let norm_b = store.add("norm.b", Tensor::zeros(&[dl]), bb);
        let head_w = store.add(
            "head.w",
            Tensor::from_fn(&[config.num_classes, dl], |_| rng.uniform(-bound(dl), bound(dl))),
            ParamGroup::Head,
        );
        let head_b = store.add("head.b", Tensor::zeros(&[config.num_classes]), ParamGroup::Head);
        Ok(Self {
            config,
            block,
            store,
            ids: BackboneIds {
                patch_w,
                patch_b,
                stages,
                merges,
                norm_g,
                norm_b,
                head_w,
                head_b,
            },
        })
    }

    fn stage_block(&self, s: usize) -> BlockConfig {
        BlockConfig {
            dim: self.config.stage_dims[s],
            ..self.block.clone()
        }
    }

    /// Pooled features `[D_last]` on the tape, using `store` for weights.
    pub fn features_tape(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        let [h, w, c] = shape[..] else {
            return Err(Error::shape("backbone_forward", format!("{shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "backbone_forward",
                format!("{c} input channels, expected {}", self.config.in_channels),
            ));
        }
        self.config.check_input(h, w)?;
        let p = self.config.patch_size;
        let (mut hh, mut ww) = (h / p, w / p);
        let patches = tape.gather(image, patch_index(h, w, c, p), &[hh * ww, p * p * c])?;
        let (pw, pb) = (tape.param(store, self.ids.patch_w), tape.param(store, self.ids.patch_b));
        let emb = tape.linear(patches, pw, Some(pb))?;
        let mut x = tape.reshape(emb, &[hh, ww, self.config.stage_dims[0]])?;
        for (s, blocks) in self.ids.stages.iter().enumerate() {
            if s > 0 {
                let d = self.config.stage_dims[s - 1];
                let rows = tape.gather(x, patch_index(hh, ww, d, 2), &[hh * ww / 4, 4 * d])?;
                hh /= 2;
                ww /= 2;
                let mw = tape.param(store, self.ids.merges[s - 1]);
                let red = tape.linear(rows, mw, None)?;
                x = tape.reshape(red, &[hh, ww, 2 * d])?;
            }
            let cfg = self.stage_block(s);
            for ids in blocks {
                x = block_tape(tape, store, &cfg, ids, x)?;
            }
        }
        let dl = *self.config.stage_dims.last().unwrap();
        let (g, b) = (tape.param(store, self.ids.norm_g), tape.param(store, self.ids.norm_b));
        let xn = tape.layer_norm(x, g, b, self.block.norm_eps)?;
        let rows = tape.reshape(xn, &[hh * ww, dl])?;
        tape.mean_rows(rows)
    }

    pub fn logits_tape(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let f = self.features_tape(tape, store, image)?;
        self.head_tape(tape, store, f)
    }

    pub fn head_tape(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let dl = tape.value(features).len();
        let f = tape.reshape(features, &[1, dl])?;
        let (hw, hb) = (tape.param(store, self.ids.head_w), tape.param(store, self.ids.head_b));
        let z = tape.linear(f, hw, Some(hb))?;
        tape.reshape(z, &[self.config.num_classes])
    }

    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let f = self.features_tape(&mut tape, &self.store, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let z = self.logits_tape(&mut tape, &self.store, x)?;
        Ok(tape.value(z).clone())
    }
}

pub fn backbone_forward(image: &Tensor, model: &Backbone) -> Result<Tensor> {
    model.logits(image)
}
