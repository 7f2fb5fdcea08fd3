use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mamba_adaptor::grad::ParamStore;
use mamba_adaptor::harness::{
    ablate, bench_scan, describe, dump_fixture, finetune, gen_dataset, replay_fixture, train,
    FixtureMeta, FixtureOp, RunConfig, RunReport,
};
use mamba_adaptor::model::{AdaptorInit, BlockConfig, Insertion};
use mamba_adaptor::{Error, Precision};

/// Toy-scale driver for the selective-scan adaptors: training, transfer,
/// benchmarks, ablations and golden fixtures.
#[derive(Parser, Debug)]
#[command(name = "mamba-adaptor", version)]
struct Cli {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Storage precision for dumps, datasets and benchmarks.
    #[arg(long, global = true, default_value = "f64")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy backbone from scratch.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue with zero-initialized parallel adaptors for N steps.
        #[arg(long)]
        booster_steps: Option<usize>,
    },
    /// Freeze a base model and train parallel adaptors plus head.
    Finetune {
        /// Base checkpoint; pretrained in-process when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sequential versus parallel scan throughput.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sweep the `[ablate]` axes of the config.
    Ablate,
    /// Write a golden fixture (weights, input and expected output).
    Dump {
        #[arg(long, default_value = "ss2d")]
        op: String,
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
    },
    /// Recompute a fixture directory, or describe a single MATD file.
    Replay { path: PathBuf },
    /// Write the configured train/test splits as MATD directories.
    GenData,
}

fn write_report(r: &RunReport, out: &Path, name: &str) -> Result<(), Error> {
    r.write(out, name)?;
    print!("{}", r.render());
    log::info!("wrote {}", out.join(format!("{name}.txt")).display());
    Ok(())
}

/// `Ok(true)` on success, `Ok(false)` when a run finished but failed its
/// own check.
fn run(cli: Cli) -> Result<bool, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::Train {
            steps,
            booster_steps,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = booster_steps {
                cfg.train.booster_steps = b;
            }
            let run = train(&cfg, Some(out))?;
            run.model.store.save(out.join("model.ckpt"))?;
            write_report(&run.report, out, "train")?;
            Ok(run.phase.final_loss < run.phase.initial_loss)
        }
        Command::Finetune { base, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let base = match base.or(cfg.finetune.base.clone()) {
                Some(p) => Some(ParamStore::load(p)?),
                None => None,
            };
            let run = finetune(&cfg, base.as_ref(), Some(out))?;
            run.base.store.save(out.join("base.ckpt"))?;
            run.model.store.save(out.join("adapted.ckpt"))?;
            write_report(&run.report, out, "finetune")?;
            Ok(cfg.train.steps == 0 || run.phase.final_loss < run.phase.initial_loss)
        }
        Command::Bench { lengths, workers } => {
            if let Some(l) = lengths {
                cfg.bench.lengths = l;
            }
            if let Some(w) = workers {
                cfg.bench.workers = w;
            }
            let (r, _) = bench_scan(&cfg.bench, cli.precision, cfg.seed)?;
            write_report(&r, out, "bench")?;
            Ok(true)
        }
        Command::Ablate => {
            let (r, _) = ablate(&cfg, Some(out))?;
            write_report(&r, out, "ablate")?;
            Ok(true)
        }
        Command::Dump {
            op,
            height,
            width,
            dim,
        } => {
            let op = match op.as_str() {
                "ss2d" => FixtureOp::Ss2d,
                "block" => FixtureOp::Block,
                o => return Err(Error::Config(format!("unknown fixture op `{o}`"))),
            };
            let block = if cli.config.is_some() {
                BlockConfig { dim, ..cfg.block }
            } else {
                BlockConfig {
                    adaptor_init: AdaptorInit::Random,
                    ..BlockConfig::with_adaptors(dim, Insertion::Sequential)
                }
            };
            let meta = FixtureMeta {
                op,
                height,
                width,
                block,
            };
            dump_fixture(out, &meta, cfg.seed, cli.precision)?;
            let check = replay_fixture(out)?;
            print!("{}", check.report.render());
            Ok(check.passed())
        }
        Command::Replay { path } => {
            if path.is_dir() {
                let r = replay_fixture(&path)?;
                print!("{}", r.report.render());
                Ok(r.passed())
            } else {
                let (_, r) = describe(&path)?;
                print!("{}", r.render());
                Ok(true)
            }
        }
        Command::GenData => {
            let (tr, te) = cfg.data.specs(cfg.seed);
            for (name, spec) in [("train", tr), ("test", te)] {
                let d = gen_dataset(&spec)?;
                d.save_dir(out.join(name), cli.precision)?;
                println!("{name}: {} samples -> {}", d.len(), out.join(name).display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
