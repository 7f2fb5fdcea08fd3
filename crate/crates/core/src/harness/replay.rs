//! Golden fixtures: a block config, its weights, an input and the expected
//! output, replayed against fresh recomputation.
//!
//! Layout of a fixture directory:
//!
//! ```text
//! fixture.toml   op and block config
//! params.ckpt    block weights
//! input.matd     [H×W×D]
//! expected.matd  op(input)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::RunReport;
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::matd;
use crate::model::{block_forward, ss2d_forward, Block, BlockConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureOp {
    Ss2d,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureMeta {
    pub op: FixtureOp,
    pub height: usize,
    pub width: usize,
    pub block: BlockConfig,
}

pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-12,
        Precision::F32 => 1e-6,
    }
}

fn run(op: FixtureOp, x: &Tensor, block: &Block) -> Result<Tensor> {
    match op {
        FixtureOp::Ss2d => ss2d_forward(x, block),
        FixtureOp::Block => block_forward(x, block),
    }
}

/// Writes a fixture whose weights and input derive from `seed`. The input
/// is rounded to `precision` before the expected output is computed.
pub fn dump_fixture(
    dir: impl AsRef<Path>,
    meta: &FixtureMeta,
    seed: u64,
    precision: Precision,
) -> Result<Tensor> {
    let dir = dir.as_ref();
    let block = Block::new(meta.block.clone(), &mut SplitMix64::new(seed))?;
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    let x = Tensor::from_fn(&[meta.height, meta.width, meta.block.dim], |_| rng.uniform(-1.0, 1.0))
        .round_to(precision);
    let y = run(meta.op, &x, &block)?;
    fs::create_dir_all(dir)?;
    let text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("fixture.toml"), text)?;
    block.store.save(dir.join("params.ckpt"))?;
    matd::write(dir.join("input.matd"), &x, precision)?;
    matd::write(dir.join("expected.matd"), &y, precision)?;
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub report: RunReport,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
}

impl ReplayOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tolerance
    }
}

pub fn replay_fixture(dir: impl AsRef<Path>) -> Result<ReplayOutcome> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("fixture.toml"))?;
    let meta: FixtureMeta = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut block = Block::new(meta.block.clone(), &mut SplitMix64::new(0))?;
    let stored = ParamStore::load(dir.join("params.ckpt"))?;
    if stored.len() != block.store.len() || block.store.load_matching(&stored)? != stored.len() {
        return Err(Error::Format("fixture weights do not match its block config".into()));
    }
    let (x, _) = matd::read(dir.join("input.matd"))?;
    let (expected, precision) = matd::read(dir.join("expected.matd"))?;
    let got = run(meta.op, &x, &block)?.round_to(precision);
    if got.shape() != expected.shape() {
        return Err(Error::shape(
            "replay",
            format!("{:?} vs stored {:?}", got.shape(), expected.shape()),
        ));
    }
    let (max_abs, max_rel) = (got.max_abs_diff(&expected), got.rel_dev(&expected));
    let tolerance = tolerance(precision);
    let mut r = RunReport::new("replay", 0);
    r.kv("fixture", dir.display());
    r.kv("op", format!("{:?}", meta.op).to_lowercase());
    r.kv("shape", format!("{:?}", expected.shape()));
    r.kv("precision", precision);
    r.kv("max_abs_deviation", format!("{max_abs:e}"));
    r.kv("max_rel_deviation", format!("{max_rel:e}"));
    r.kv("tolerance", format!("{tolerance:e}"));
    r.kv("status", if max_rel <= tolerance { "pass" } else { "fail" });
    Ok(ReplayOutcome {
        report: r,
        max_abs,
        max_rel,
        tolerance,
    })
}

/// Summary of a single MATD file.
pub fn describe(path: impl AsRef<Path>) -> Result<(Tensor, RunReport)> {
    let path = path.as_ref();
    let (t, p) = matd::read(path)?;
    let mut r = RunReport::new("replay", 0);
    r.kv("file", path.display());
    r.kv("shape", format!("{:?}", t.shape()));
    r.kv("precision", p);
    r.kv("sum", format!("{:e}", t.sum()));
    r.kv("max_abs", format!("{:e}", t.max_abs()));
    Ok((t, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdaptorInit, Insertion};

    fn meta() -> FixtureMeta {
        let mut block = BlockConfig::with_adaptors(2, Insertion::Sequential);
        block.adaptor_init = AdaptorInit::Random;
        FixtureMeta {
            op: FixtureOp::Ss2d,
            height: 4,
            width: 4,
            block,
        }
    }

    #[test]
    fn dump_then_replay_is_exact() {
        for p in [Precision::F64, Precision::F32] {
            let dir = tempfile::tempdir().unwrap();
            dump_fixture(dir.path(), &meta(), 3, p).unwrap();
            let out = replay_fixture(dir.path()).unwrap();
            assert_eq!(out.max_abs, 0.0);
            assert!(out.passed());
        }
    }

    #[test]
    fn tampered_expectation_fails() {
        let dir = tempfile::tempdir().unwrap();
        let y = dump_fixture(dir.path(), &meta(), 3, Precision::F64).unwrap();
        let bumped = y.map(|v| v + 1e-6);
        matd::write(dir.path().join("expected.matd"), &bumped, Precision::F64).unwrap();
        let out = replay_fixture(dir.path()).unwrap();
        assert!(!out.passed());
        assert_eq!(out.report.get("status"), Some("fail"));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        dump_fixture(dir.path(), &meta(), 3, Precision::F64).unwrap();
        let p = dir.path().join("input.matd");
        let mut bytes = fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"MATX");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(replay_fixture(dir.path()), Err(Error::Format(_))));
        assert!(matches!(describe(&p), Err(Error::Format(_))));
    }
}
