//! Vision-Mamba layer, adaptor insertion and the four-stage toy backbone.

mod backbone;
mod block;
mod config;

pub use backbone::{backbone_forward, patch_index, Backbone, BackboneIds};
pub use block::{
    block_forward, block_tape, init_block, insert_adaptor, spread_position_bias, ss2d_forward,
    ss2d_tape, AdaptorTIds, Block, BlockIds, CoeffIds,
};
pub use config::{AdaptorInit, AdaptorSSpec, AdaptorTSpec, BackboneConfig, BlockConfig, Insertion};

use crate::error::Result;
use crate::grad::checks::weighted_sum;
use crate::grad::{fd_check, FdReport};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

/// Finite-difference check of a full toy block (both adaptors inserted
/// sequentially, random adaptor weights) on an `8×8×8` input.
pub fn block_gradient_check(seed: u64) -> Result<FdReport> {
    let mut cfg = BlockConfig::with_adaptors(8, Insertion::Sequential);
    cfg.adaptor_init = AdaptorInit::Random;
    let block = Block::new(cfg, &mut SplitMix64::new(seed))?;
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    let x = Tensor::from_fn(&[8, 8, 8], |_| rng.uniform(-1.0, 1.0));
    let loss_seed = derive_seed(seed, 2);
    fd_check(
        &block.store,
        |s, t| {
            let xv = t.leaf(x.clone());
            let y = block_tape(t, s, &block.config, &block.ids, xv)?;
            weighted_sum(t, y, loss_seed)
        },
        &mut SplitMix64::new(derive_seed(seed, 3)),
    )
}

#[cfg(test)]
mod tests;
