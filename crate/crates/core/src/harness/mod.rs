//! Synthetic data, training, fine-tuning, benchmarks, ablations and golden
//! fixtures behind the `mamba-adaptor` CLI.

mod ablate;
mod bench;
mod config;
mod data;
mod replay;
mod report;
mod train;

pub use ablate::{ablate, cartesian, cell_config, Cell};
pub use bench::{bench_scan, BenchRow};
pub use config::{
    apply_axis, normalize_block, AblateConfig, Axis, BenchConfig, DataConfig, FinetuneConfig,
    RunConfig, TrainConfig,
};
pub use data::{gen_dataset, pairing_label, Dataset, SyntheticSpec, Task};
pub use replay::{describe, dump_fixture, replay_fixture, tolerance, FixtureMeta, FixtureOp, ReplayOutcome};
pub use report::{fmt_f, RunReport, Table};
pub use train::{
    evaluate, evaluate_with, finetune, fit, linear_probe, load_data, train, FinetuneOutcome, Phase,
    StepRecord, TrainOutcome,
};
