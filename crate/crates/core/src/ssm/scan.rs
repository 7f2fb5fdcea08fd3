//! Solvers for the diagonal linear recurrence `h_t = a_t ⊙ h_{t−1} + b_t`.
//!
//! Both solvers work on flat buffers of `L` steps × `lanes` independent
//! lanes (lanes = D·N for an SSM). The sequential solver is the reference.
//! The parallel solver is a chunked tree scan: each chunk is scanned
//! locally, a Blelloch up/down sweep over chunk summaries produces every
//! chunk's carry-in state, and a fix-up pass folds the carry into each
//! chunk. Chunk work may run on several workers; the tree is evaluated in a
//! fixed order so the result does not depend on the worker count.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOptions {
    /// Steps per chunk; must be a power of two.
    pub chunk: usize,
    pub workers: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            chunk: DEFAULT_CHUNK,
            workers: 1,
        }
    }
}

/// The associative operator on `(a, b)` pairs, `first` preceding `second`
/// in time: `(a₂a₁, a₂b₁ + b₂)`.
#[inline]
pub fn combine<T: Float>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

pub fn scan_sequential_raw<T: Float>(a: &[T], b: &[T], lanes: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), out.len());
    if a.is_empty() {
        return;
    }
    out[..lanes].copy_from_slice(&b[..lanes]);
    for t in 1..a.len() / lanes {
        let (done, rest) = out.split_at_mut(t * lanes);
        let prev = &done[(t - 1) * lanes..];
        let cur = &mut rest[..lanes];
        let at = &a[t * lanes..(t + 1) * lanes];
        let bt = &b[t * lanes..(t + 1) * lanes];
        for j in 0..lanes {
            cur[j] = at[j] * prev[j] + bt[j];
        }
    }
}

/// Scans one chunk in place: `out` receives local states (zero carry-in),
/// `prefix` the running product of `a` within the chunk.
fn scan_chunk<T: Float>(a: &[T], b: &[T], lanes: usize, out: &mut [T], prefix: &mut [T]) {
    out[..lanes].copy_from_slice(&b[..lanes]);
    prefix[..lanes].copy_from_slice(&a[..lanes]);
    for t in 1..a.len() / lanes {
        for j in 0..lanes {
            let i = t * lanes + j;
            out[i] = a[i] * out[i - lanes] + b[i];
            prefix[i] = a[i] * prefix[i - lanes];
        }
    }
}

/// Exclusive Blelloch scan over per-chunk summaries, lane by lane. On
/// return `sums[c]` holds the composition of chunks `0..c`.
fn blelloch_exclusive<T: Float>(sums: &mut Vec<(T, T)>, chunks: usize, lanes: usize) {
    let size = chunks.next_power_of_two();
    let identity = (T::one(), T::zero());
    sums.resize(size * lanes, identity);
    let at = |c: usize, j: usize| c * lanes + j;

    let mut d = 1;
    while d < size {
        let mut i = 0;
        while i < size {
            let (left, right) = (i + d - 1, i + 2 * d - 1);
            for j in 0..lanes {
                sums[at(right, j)] = combine(sums[at(left, j)], sums[at(right, j)]);
            }
            i += 2 * d;
        }
        d *= 2;
    }
    for j in 0..lanes {
        sums[at(size - 1, j)] = identity;
    }
    d = size / 2;
    while d >= 1 {
        let mut i = 0;
        while i < size {
            let (left, right) = (i + d - 1, i + 2 * d - 1);
            for j in 0..lanes {
                let left_total = sums[at(left, j)];
                let before = sums[at(right, j)];
                sums[at(left, j)] = before;
                sums[at(right, j)] = combine(before, left_total);
            }
            i += 2 * d;
        }
        d /= 2;
    }
}

pub fn scan_parallel_raw<T: Float + Send + Sync>(
    a: &[T],
    b: &[T],
    lanes: usize,
    opts: ScanOptions,
    out: &mut [T],
) {
    debug_assert!(opts.chunk.is_power_of_two());
    let steps = a.len() / lanes;
    if steps <= 1 {
        out.copy_from_slice(b);
        return;
    }
    let span = opts.chunk * lanes;
    let chunks = steps.div_ceil(opts.chunk);
    let mut prefix = vec![T::zero(); a.len()];

    let local = |((o, p), (ac, bc)): ((&mut [T], &mut [T]), (&[T], &[T]))| {
        scan_chunk(ac, bc, lanes, o, p);
    };
    let fix = |(c, (o, p)): (usize, (&mut [T], &[T])), carry: &[(T, T)]| {
        if c == 0 {
            return;
        }
        let h_in = &carry[c * lanes..(c + 1) * lanes];
        for (orow, prow) in o.chunks_mut(lanes).zip(p.chunks(lanes)) {
            for j in 0..lanes {
                orow[j] = prow[j] * h_in[j].1 + orow[j];
            }
        }
    };

    let summaries = |out: &[T], prefix: &[T]| {
        let mut sums: Vec<(T, T)> = Vec::with_capacity(chunks * lanes);
        for c in 0..chunks {
            let last = ((c * opts.chunk + opts.chunk).min(steps) - 1) * lanes;
            for j in 0..lanes {
                sums.push((prefix[last + j], out[last + j]));
            }
        }
        blelloch_exclusive(&mut sums, chunks, lanes);
        sums
    };

    let run = |out: &mut [T], prefix: &mut [T]| {
        out.par_chunks_mut(span)
            .zip(prefix.par_chunks_mut(span))
            .zip(a.par_chunks(span).zip(b.par_chunks(span)))
            .for_each(local);

        let sums = summaries(out, prefix);

        out.par_chunks_mut(span)
            .zip(prefix.par_chunks(span))
            .enumerate()
            .for_each(|item| fix(item, &sums));
    };

    if opts.workers <= 1 {
        out.chunks_mut(span)
            .zip(prefix.chunks_mut(span))
            .zip(a.chunks(span).zip(b.chunks(span)))
            .for_each(local);
        let sums = summaries(out, &prefix);
        for item in out.chunks_mut(span).zip(prefix.chunks(span)).enumerate() {
            fix(item, &sums);
        }
        return;
    }
    match rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build() {
        Ok(pool) => pool.install(|| run(out, &mut prefix)),
        Err(_) => run(out, &mut prefix),
    }
}

fn check_pair(abar: &Tensor, bu: &Tensor, op: &'static str) -> Result<usize> {
    if abar.shape() != bu.shape() || abar.rank() < 2 {
        return Err(Error::shape(
            op,
            format!("Ā{:?} vs B̄u{:?}", abar.shape(), bu.shape()),
        ));
    }
    Ok(abar.len() / abar.shape()[0])
}

/// Reference solver: left-to-right recurrence from an empty initial state.
pub fn scan_sequential(abar: &Tensor, bu: &Tensor) -> Result<Tensor> {
    let lanes = check_pair(abar, bu, "scan_sequential")?;
    let mut out = vec![0.0; abar.len()];
    scan_sequential_raw(abar.data(), bu.data(), lanes, &mut out);
    Tensor::from_parts(abar.shape().to_vec(), out).checked("scan_sequential")
}

pub fn scan_parallel(abar: &Tensor, bu: &Tensor, chunk: usize) -> Result<Tensor> {
    scan_parallel_with(abar, bu, ScanOptions { chunk, workers: 1 })
}

pub fn scan_parallel_with(abar: &Tensor, bu: &Tensor, opts: ScanOptions) -> Result<Tensor> {
    let lanes = check_pair(abar, bu, "scan_parallel")?;
    if opts.chunk == 0 || !opts.chunk.is_power_of_two() {
        return Err(Error::Config(format!(
            "scan chunk must be a positive power of two, got {}",
            opts.chunk
        )));
    }
    let mut out = vec![0.0; abar.len()];
    scan_parallel_raw(abar.data(), bu.data(), lanes, opts, &mut out);
    Tensor::from_parts(abar.shape().to_vec(), out).checked("scan_parallel")
}
