//! Execution-mode dispatch for batch-level data parallelism.
//!
//! Every hot kernel in the crate takes an [`ExecMode`] and runs either a
//! plain sequential loop or a rayon parallel loop over independent batch
//! items. Both paths produce bit-identical results: parallel work is always
//! partitioned over disjoint outputs and reductions are folded in batch
//! order on the calling thread.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

#[cfg(feature = "parallel")]
use ndarray::parallel::prelude::*;

/// How batch-parallel kernels execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Plain loops on the calling thread.
    Sequential,
    /// Data-parallel over batch items via rayon.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        default_mode()
    }
}

/// The mode used when callers do not ask for anything specific:
/// parallel when the `parallel` feature is on, sequential otherwise.
pub fn default_mode() -> ExecMode {
    #[cfg(feature = "parallel")]
    {
        ExecMode::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    {
        ExecMode::Sequential
    }
}

/// Apply `f` to each row-chunk of `out` (chunks of `rows_per_item` rows),
/// one chunk per batch item. Chunks are disjoint, so the parallel path
/// writes the same values as the sequential one.
pub fn for_each_row_chunk<F>(mode: ExecMode, out: &mut Array2<f64>, rows_per_item: usize, f: F)
where
    F: Fn(usize, ArrayViewMut2<f64>) + Sync + Send,
{
    debug_assert_eq!(out.nrows() % rows_per_item.max(1), 0);
    match mode {
        ExecMode::Sequential => {
            for (i, chunk) in out.axis_chunks_iter_mut(Axis(0), rows_per_item).enumerate() {
                f(i, chunk);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            out.axis_chunks_iter_mut(Axis(0), rows_per_item)
                .into_par_iter()
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        }
    }
}

/// Map each index in `0..n` to a value, collecting in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Matrix product `a · b` with the row dimension of `a` split across
/// threads. Each output row is produced by exactly one GEMM call with the
/// same inner summation order as the sequential path, so results are
/// bit-identical across modes and thread counts.
pub fn matmul(mode: ExecMode, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions disagree");
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = Array2::<f64>::zeros((m, n));
    // Below this size the spawn overhead is not worth it.
    const PAR_THRESHOLD: usize = 1 << 16;
    let par_worthwhile = m * n * a.ncols() >= PAR_THRESHOLD && m > 1;
    match mode {
        ExecMode::Sequential => {
            out.assign(&a.dot(&b));
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel if par_worthwhile => {
            let threads = rayon::current_num_threads().max(1);
            let rows_per_chunk = m.div_ceil(threads);
            out.axis_chunks_iter_mut(Axis(0), rows_per_chunk)
                .into_par_iter()
                .enumerate()
                .for_each(|(i, mut chunk)| {
                    let lo = i * rows_per_chunk;
                    let hi = (lo + chunk.nrows()).min(m);
                    chunk.assign(&a.slice(ndarray::s![lo..hi, ..]).dot(&b));
                });
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            out.assign(&a.dot(&b));
        }
    }
    out
}

/// Elementwise `out += a * scale`.
pub fn axpy(out: &mut Array2<f64>, a: &ArrayView2<f64>, scale: f64) {
    Zip::from(out).and(a).for_each(|o, &v| *o += v * scale);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn matmul_matches_ndarray_dot() {
        let a = Array::from_shape_fn((37, 19), |(i, j)| (i as f64 * 0.37 - j as f64 * 0.11).sin());
        let b = Array::from_shape_fn((19, 23), |(i, j)| (i as f64 + 2.0 * j as f64).cos());
        let want = a.dot(&b);
        let seq = matmul(ExecMode::Sequential, a.view(), b.view());
        assert_eq!(seq, want);
        #[cfg(feature = "parallel")]
        {
            let par = matmul(ExecMode::Parallel, a.view(), b.view());
            assert_eq!(par, want);
        }
    }

    #[test]
    fn row_chunks_cover_all_items() {
        let mut out = Array2::<f64>::zeros((12, 3));
        for_each_row_chunk(default_mode(), &mut out, 4, |i, mut chunk| {
            chunk.fill(i as f64 + 1.0);
        });
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[5, 2]], 2.0);
        assert_eq!(out[[11, 0]], 3.0);
    }
}
