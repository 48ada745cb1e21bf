//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) per-pixel maps and reductions run on
//! the rayon pool. Every helper produces bit-identical results to its
//! sequential path: maps are index-addressed and reductions use a fixed
//! pairwise tree whose shape depends only on the input length.
//!
//! [`set_sequential`] forces the sequential path at runtime, which the
//! benches use to compare both.

use ndarray::Array2;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Leaf size of the pairwise summation tree.
const SUM_BLOCK: usize = 256;
/// Below this length reductions never fork.
#[cfg(feature = "parallel")]
const PAR_SUM_MIN: usize = 1 << 15;
/// Below this length maps never fork.
#[cfg(feature = "parallel")]
const PAR_MAP_MIN: usize = 1 << 12;

/// Forces (or releases) the sequential code path process-wide.
pub fn set_sequential(sequential: bool) {
    FORCE_SEQUENTIAL.store(sequential, Ordering::SeqCst);
}

/// True when helpers will dispatch work to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Evaluates `f(i)` for `i in 0..n`, in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n >= PAR_MAP_MIN && is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Builds an `h × w` array from `f(row, col)`.
pub fn grid<T, F>(h: usize, w: usize, f: F) -> Array2<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let w1 = w.max(1);
    let data = map_indexed(h * w, |k| f(k / w1, k % w1));
    Array2::from_shape_vec((h, w), data).expect("grid shape matches element count")
}

/// Pairwise sum with a fixed tree shape.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= SUM_BLOCK {
        return values.iter().sum();
    }
    let (lo, hi) = values.split_at(values.len() / 2);
    #[cfg(feature = "parallel")]
    if values.len() >= PAR_SUM_MIN && is_parallel() {
        let (a, b) = rayon::join(|| pairwise_sum(lo), || pairwise_sum(hi));
        return a + b;
    }
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// Pairwise sum of `f(i)` over `0..n`.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    pairwise_sum(&map_indexed(n, f))
}

/// Fixed-tree dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_indexed(a.len(), |i| a[i] * b[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_exact_values() {
        let v: Vec<f64> = (0..100_000).map(|i| (i % 7) as f64).collect();
        let naive: f64 = v.iter().sum();
        assert_eq!(pairwise_sum(&v), naive);
    }

    #[test]
    fn grid_is_row_major() {
        let g = grid(3, 4, |i, j| i * 10 + j);
        assert_eq!(g[[2, 3]], 23);
        assert_eq!(g[[1, 0]], 10);
    }

    #[test]
    fn empty_grid() {
        let g: Array2<f64> = grid(0, 5, |_, _| 1.0);
        assert_eq!(g.dim(), (0, 5));
    }
}
