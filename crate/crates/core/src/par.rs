//! Ordered data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it, or when
//! [`Exec::Sequential`] is requested, they run on the calling thread. Output
//! order always matches input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel loops in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Sums equal-length vectors produced by `f` over `items`.
///
/// Items are grouped into fixed-size chunks independent of the thread count;
/// each chunk is summed left to right and the chunk sums are then added in
/// order, so the result is bit-identical for any worker count.
pub fn sum_vectors<T, F>(exec: Exec, items: &[T], len: usize, chunk: usize, f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks: Vec<&[T]> = items.chunks(chunk).collect();
    let partials = map(exec, &chunks, |c| {
        let mut acc = vec![0.0; len];
        for item in c.iter() {
            f(item, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..100).collect();
        let seq = map(Exec::Sequential, &xs, |x| x * 3);
        let par = map(Exec::Parallel, &xs, |x| x * 3);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 21);
    }

    #[test]
    fn vector_sum_is_execution_independent() {
        let xs: Vec<f64> = (0..37).map(|i| 0.1 * i as f64).collect();
        let f = |x: &f64, acc: &mut [f64]| {
            acc[0] += x;
            acc[1] += x * x;
        };
        let a = sum_vectors(Exec::Sequential, &xs, 2, 4, f);
        let b = sum_vectors(Exec::Parallel, &xs, 2, 4, f);
        assert_eq!(a, b);
    }
}
