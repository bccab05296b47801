use serde::{Deserialize, Serialize};

use super::KernelError;

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::Dimension(format!(
                "buffer of length {} cannot be viewed as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, KernelError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(KernelError::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), KernelError> {
        if row.len() != self.cols {
            return Err(KernelError::Dimension(format!(
                "cannot append row of length {} to a {}x{} matrix",
                row.len(),
                self.rows,
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Stacks `a` on top of `b`.
    pub fn vstack(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, KernelError> {
        if a.cols != b.cols && a.rows > 0 && b.rows > 0 {
            return Err(KernelError::Dimension(format!(
                "cannot stack {}x{} on {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let cols = if a.rows > 0 { a.cols } else { b.cols };
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor2 {
            rows: a.rows + b.rows,
            cols,
            data,
        })
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2 {
        Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Returns the first `n` columns of every row.
    pub fn leading_cols(&self, n: usize) -> Tensor2 {
        let n = n.min(self.cols);
        let mut out = Tensor2::zeros(self.rows, n);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..n]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, rows: usize, cols: usize, what: &str) -> Result<(), KernelError> {
        if self.rows != rows || self.cols != cols {
            return Err(KernelError::Dimension(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// `C = A·B` (+ `C` when `accumulate`).
pub(crate) fn gemm_nn(a: &Tensor2, b: &Tensor2, c: &mut Tensor2, accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((c.rows, c.cols), (a.rows, b.cols));
    let beta = if accumulate { 1.0 } else { 0.0 };
    dgemm(
        a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, beta,
        &mut c.data, c.cols as isize,
    );
}

/// `C = A·Bᵀ`.
pub(crate) fn gemm_nt(a: &Tensor2, b: &Tensor2, c: &mut Tensor2, accumulate: bool) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!((c.rows, c.cols), (a.rows, b.rows));
    let beta = if accumulate { 1.0 } else { 0.0 };
    dgemm(
        a.rows, a.cols, b.rows, &a.data, a.cols as isize, 1, &b.data, 1, b.cols as isize, beta,
        &mut c.data, c.cols as isize,
    );
}

/// `C = Aᵀ·B`.
pub(crate) fn gemm_tn(a: &Tensor2, b: &Tensor2, c: &mut Tensor2, accumulate: bool) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!((c.rows, c.cols), (a.cols, b.cols));
    let beta = if accumulate { 1.0 } else { 0.0 };
    dgemm(
        a.cols, a.rows, b.cols, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1, beta,
        &mut c.data, c.cols as isize,
    );
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass buffers whose lengths match the row/column strides
    // for an m×k, k×n and m×n view.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

/// Adds `bias` to every row.
pub(crate) fn add_row_bias(t: &mut Tensor2, bias: &[f64]) {
    debug_assert_eq!(t.cols, bias.len());
    for row in t.data.chunks_exact_mut(bias.len().max(1)) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums, accumulated into `out`.
pub(crate) fn col_sums_into(t: &Tensor2, out: &mut [f64]) {
    debug_assert_eq!(t.cols, out.len());
    for row in t.data.chunks_exact(t.cols.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
