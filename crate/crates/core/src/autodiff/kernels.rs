//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::Float;

/// Strided matrix view: `data[offset + i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Float],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [Float], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Column block `[col_start, col_start + width)` of a dense matrix.
    pub fn columns(data: &'a [Float], rows: usize, cols: usize, col_start: usize, width: usize) -> Self {
        MatRef {
            data,
            offset: col_start,
            rows,
            cols: width,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Mutable strided matrix view.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [Float],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [Float], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn columns(data: &'a mut [Float], rows: usize, cols: usize, col_start: usize, width: usize) -> Self {
        MatMut {
            data,
            offset: col_start,
            rows,
            cols: width,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: Float, a: MatRef<'_>, b: MatRef<'_>, beta: Float, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let last = c.offset + (c.rows - 1) * c.row_stride + (c.cols - 1) * c.col_stride;
    assert!(last < c.data.len(), "gemm output view out of bounds");
    if a.cols == 0 {
        // matrixmultiply would read nothing; only the beta scaling applies.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.row_stride + j * c.col_stride;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and the output slice is uniquely borrowed.
    unsafe {
        gemm_raw(
            c.rows,
            a.cols,
            c.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as gemm_raw;
#[cfg(feature = "f64")]
use matrixmultiply::dgemm as gemm_raw;

/// Dense `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::dense(a, m, k),
        MatRef::dense(b, k, n),
        0.0,
        MatMut::dense(&mut out, m, n),
    );
    out
}

pub(crate) fn transpose(x: &[Float], rows: usize, cols: usize) -> Vec<Float> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

const GELU_C: Float = 0.797_884_6; // sqrt(2/pi)
const GELU_A: Float = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: Float) -> Float {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: Float) -> Float {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over each row of width `cols`.
pub(crate) fn softmax_rows(x: &mut [Float], cols: usize) {
    for row in x.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

/// Softmax of one row. Entries equal to `-inf` get probability zero; a row
/// with no finite entry becomes all zeros.
pub(crate) fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Smooth-l1 value and derivative in the residual `d`.
pub(crate) fn smooth_l1(d: Float) -> (Float, Float) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}
