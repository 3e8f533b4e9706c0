//! Dense matrix kernels shared by the autodiff ops.
//!
//! Matrices are described by a base slice plus row/column strides so that
//! transposed operands need no copies. With the `parallel` feature the
//! output rows are split into blocks and each block is computed on the rayon
//! pool; every output element is still accumulated in the same order, so the
//! two paths produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Strided read-only view of an `rows × cols` matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn offset_rows(self, start: usize, count: usize) -> Self {
        let data = if count == 0 {
            &self.data[..0]
        } else {
            &self.data[start * self.row_stride..]
        };
        Self {
            data,
            rows: count,
            ..self
        }
    }
}

// Below this many multiply-adds per call the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 18;
#[cfg(feature = "parallel")]
const PAR_ROW_BLOCK: usize = 32;

/// `c = a·b + beta·c` on the sequential path; `c` is row-major `a.rows × b.cols`.
pub fn gemm_seq(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides and extents describe in-bounds elements of the
    // borrowed slices, checked by the debug assertions in the constructors and
    // the length assertion above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-blocked parallel variant of [`gemm_seq`].
#[cfg(feature = "parallel")]
pub fn gemm_par(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let n = b.cols;
    if n == 0 {
        return;
    }
    c.par_chunks_mut(PAR_ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let start = blk * PAR_ROW_BLOCK;
            let rows = chunk.len() / n;
            gemm_seq(a.offset_rows(start, rows), b, beta, chunk);
        });
}

/// Dispatches to the parallel kernel for large products when enabled.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        if a.rows >= 2 * PAR_ROW_BLOCK && a.rows * a.cols * b.cols >= PAR_MIN_WORK {
            return gemm_par(a, b, beta, c);
        }
    }
    gemm_seq(a, b, beta, c)
}
