//! Thin dispatch layer over the data-parallel inner loops.
//!
//! With the `parallel` feature (default) the helpers run on rayon; without it
//! they fall back to plain sequential loops with the same block structure, so
//! numerical results are bit-identical between the two builds and across any
//! thread budget.

/// Block length used by [`stable_sum_by`]. The blocking is fixed so the
/// reduction order never depends on the thread count.
const SUM_BLOCK: usize = 4096;

#[cfg(feature = "parallel")]
pub fn max_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
pub fn max_threads() -> usize {
    1
}

/// Runs `f` inside a thread pool with exactly `threads` workers (
/// sequentially when the `parallel` feature is off).
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("building a rayon pool");
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Applies `f` to disjoint chunks of `data`, passing the chunk index.
pub(crate) fn for_each_chunk_mut<T: Send>(
    data: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Fills `out[i] = f(i)` for every index.
pub(crate) fn fill_indexed(out: &mut [f64], f: impl Fn(usize) -> f64 + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, v) in out.iter_mut().enumerate() {
            *v = f(i);
        }
    }
}

/// Deterministic sum of `f(i)` for `i in 0..len`.
///
/// Partial sums are taken over fixed-length index blocks and folded in block
/// order, so the result does not depend on the thread budget.
pub(crate) fn stable_sum_by(len: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let blocks = len.div_ceil(SUM_BLOCK);
    let block_sum = |b: usize| {
        let lo = b * SUM_BLOCK;
        let hi = (lo + SUM_BLOCK).min(len);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = {
        use rayon::prelude::*;
        (0..blocks).into_par_iter().map(block_sum).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = (0..blocks).map(block_sum).collect();
    partials.into_iter().sum()
}

/// Deterministic maximum of `f(i)` for `i in 0..len` (`f` must be finite).
pub(crate) fn stable_max_by(len: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    if len == 0 {
        return f64::NEG_INFINITY;
    }
    let blocks = len.div_ceil(SUM_BLOCK);
    let block_max = |b: usize| {
        let lo = b * SUM_BLOCK;
        let hi = (lo + SUM_BLOCK).min(len);
        let mut acc = f64::NEG_INFINITY;
        for i in lo..hi {
            acc = acc.max(f(i));
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = {
        use rayon::prelude::*;
        (0..blocks).into_par_iter().map(block_max).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = (0..blocks).map(block_max).collect();
    partials.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_sum_matches_sequential_loop_order() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin() * 1e-3).collect();
        let s1 = stable_sum_by(xs.len(), |i| xs[i]);
        let s2 = with_threads(1, || stable_sum_by(xs.len(), |i| xs[i]));
        let s4 = with_threads(4, || stable_sum_by(xs.len(), |i| xs[i]));
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_eq!(s1.to_bits(), s4.to_bits());
    }

    #[test]
    fn stable_max_finds_the_maximum() {
        let m = stable_max_by(5000, |i| -((i as f64 - 1234.0).powi(2)));
        assert_eq!(m, 0.0);
    }
}
