//! Sequential versus chunked-parallel scan throughput.

use std::time::{Duration, Instant};

use num_traits::{Float, FromPrimitive};

use super::config::BenchConfig;
use super::report::{RunReport, Table};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::ssm::{scan_parallel_raw, scan_sequential_raw, ScanOptions};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub seq_ns_per_elem: f64,
    pub par_ns_per_elem: f64,
    pub max_rel_dev: f64,
}

fn best_of(repeats: usize, mut f: impl FnMut()) -> Duration {
    (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn bench_one<T: Float + FromPrimitive + Send + Sync>(
    cfg: &BenchConfig,
    len: usize,
    opts: ScanOptions,
    seed: u64,
    tol: f64,
) -> Result<BenchRow> {
    let lanes = cfg.channels * cfg.state;
    let mut rng = SplitMix64::new(derive_seed(seed, len as u64));
    let n = len * lanes;
    let cast = |x: f64| T::from_f64(x).unwrap();
    let a: Vec<T> = (0..n).map(|_| cast(rng.uniform(0.5, 1.0))).collect();
    let b: Vec<T> = (0..n).map(|_| cast(rng.uniform(-1.0, 1.0))).collect();
    let (mut seq, mut par) = (vec![T::zero(); n], vec![T::zero(); n]);
    scan_sequential_raw(&a, &b, lanes, &mut seq);
    scan_parallel_raw(&a, &b, lanes, opts, &mut par);
    let mut dev: f64 = 0.0;
    for (s, p) in seq.iter().zip(&par) {
        let (s, p) = (s.to_f64().unwrap(), p.to_f64().unwrap());
        dev = dev.max((s - p).abs() / s.abs().max(1.0));
    }
    if !(dev <= tol) {
        return Err(Error::Contract(format!(
            "parallel scan deviates from sequential by {dev:e} at L = {len}"
        )));
    }
    let ts = best_of(cfg.repeats, || scan_sequential_raw(&a, &b, lanes, &mut seq));
    let tp = best_of(cfg.repeats, || scan_parallel_raw(&a, &b, lanes, opts, &mut par));
    let per = |d: Duration| d.as_nanos() as f64 / n as f64;
    Ok(BenchRow {
        len,
        seq_ns_per_elem: per(ts),
        par_ns_per_elem: per(tp),
        max_rel_dev: dev,
    })
}

/// Times both solvers over `cfg.lengths` after checking they agree.
pub fn bench_scan(cfg: &BenchConfig, precision: Precision, seed: u64) -> Result<(RunReport, Vec<BenchRow>)> {
    if cfg.channels == 0 || cfg.state == 0 || cfg.lengths.contains(&0) {
        return Err(Error::Config("bench extents must be positive".into()));
    }
    if cfg.chunk == 0 || !cfg.chunk.is_power_of_two() {
        return Err(Error::Config(format!("chunk {} is not a power of two", cfg.chunk)));
    }
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    };
    let opts = ScanOptions {
        chunk: cfg.chunk,
        workers,
    };
    let rows = cfg
        .lengths
        .iter()
        .map(|&len| match precision {
            Precision::F64 => bench_one::<f64>(cfg, len, opts, seed, 1e-6),
            Precision::F32 => bench_one::<f32>(cfg, len, opts, seed, 1e-4),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut r = RunReport::new("bench", seed);
    r.kv("precision", precision);
    r.kv("channels", cfg.channels);
    r.kv("state", cfg.state);
    r.kv("workers", workers);
    r.kv("chunk", cfg.chunk);
    r.kv("repeats", cfg.repeats);
    let mut t = Table::new(
        "scan throughput",
        &["L", "sequential ns/elem", "parallel ns/elem", "speedup", "max rel dev"],
    );
    for row in &rows {
        t.push(vec![
            row.len.to_string(),
            format!("{:.3}", row.seq_ns_per_elem),
            format!("{:.3}", row.par_ns_per_elem),
            format!("{:.2}", row.seq_ns_per_elem / row.par_ns_per_elem),
            format!("{:.1e}", row.max_rel_dev),
        ]);
    }
    r.tables.push(t);
    Ok((r, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_echoes_workers_and_chunk() {
        let cfg = BenchConfig {
            lengths: vec![1, 100, 257],
            repeats: 1,
            workers: 2,
            ..BenchConfig::default()
        };
        for p in [Precision::F64, Precision::F32] {
            let (r, rows) = bench_scan(&cfg, p, 1).unwrap();
            assert_eq!(rows.len(), 3);
            assert_eq!(r.get("workers"), Some("2"));
            assert_eq!(r.get("chunk"), Some("64"));
            assert!(rows.iter().all(|x| x.max_rel_dev <= 1e-4));
        }
    }

    #[test]
    fn rejects_bad_chunk() {
        let cfg = BenchConfig {
            chunk: 48,
            ..BenchConfig::default()
        };
        assert!(bench_scan(&cfg, Precision::F64, 0).is_err());
    }
}
