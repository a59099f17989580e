//! Deterministic data-parallel helpers.
//!
//! Work over `0..n` is cut into fixed chunks of [`CHUNK`] items. Chunk
//! boundaries never depend on the worker count and partial results are
//! folded in chunk order, so reductions are bit-identical whether they run
//! on rayon or on the calling thread.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const CHUNK: usize = 512;

/// Execution strategy for particle loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` degrades to `Sequential` when the `parallel` feature is off.
    pub fn effective(self) -> Exec {
        if cfg!(feature = "parallel") {
            self
        } else {
            Exec::Sequential
        }
    }
}

fn chunk_range(c: usize, n: usize) -> Range<usize> {
    let start = c * CHUNK;
    start..(start + CHUNK).min(n)
}

/// Maps every chunk of `0..n` and folds the partial results in chunk order.
pub fn map_reduce<T, M, R>(exec: Exec, n: usize, identity: T, map: M, reduce: R) -> T
where
    T: Send,
    M: Fn(Range<usize>) -> T + Sync + Send,
    R: Fn(T, T) -> T,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<T> = match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..chunks)
            .into_par_iter()
            .map(|c| map(chunk_range(c, n)))
            .collect(),
        _ => (0..chunks).map(|c| map(chunk_range(c, n))).collect(),
    };
    parts.into_iter().fold(identity, reduce)
}

/// Runs `f(offset, chunk)` over fixed chunks of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| f(c * CHUNK, chunk)),
        _ => data
            .chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| f(c * CHUNK, chunk)),
    }
}

/// Like [`for_each_chunk_mut`] but each chunk also returns a partial
/// result; partials are folded in chunk order.
pub fn update_reduce<T, U, F, R>(exec: Exec, data: &mut [T], identity: U, f: F, reduce: R) -> U
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T]) -> U + Sync + Send,
    R: Fn(U, U) -> U,
{
    let parts: Vec<U> = match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, chunk)| f(c * CHUNK, chunk))
            .collect(),
        _ => data
            .chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, chunk)| f(c * CHUNK, chunk))
            .collect(),
    };
    parts.into_iter().fold(identity, reduce)
}

/// Fills `out[i] = f(i)` in parallel.
pub fn fill(exec: Exec, out: &mut [f64], f: impl Fn(usize) -> f64 + Sync + Send) {
    for_each_chunk_mut(exec, out, |off, chunk| {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = f(off + j);
        }
    });
}

/// Order-preserving parallel map over a slice.
pub fn map_collect<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Mean of `f(i)` over `0..n`, reduced deterministically.
pub fn mean_of<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if n == 0 {
        return 0.0;
    }
    let total = map_reduce(exec, n, 0.0, |r| r.map(&f).sum::<f64>(), |a, b| a + b);
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_match_across_strategies() {
        let n = 10_007;
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let a = mean_of(Exec::Sequential, n, f);
        let b = mean_of(Exec::Parallel, n, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn chunk_offsets_cover_everything() {
        let mut v = vec![0usize; 2 * CHUNK + 3];
        for_each_chunk_mut(Exec::Parallel, &mut v, |off, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = off + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}
