//! Dense row-major f64 matrices.
//!
//! All model math runs on these: batches are rows, features are columns,
//! scalars are 1x1. Kernels use fixed accumulation orders (4-way unrolled
//! dots, row-axpy updates) so results are bit-reproducible run to run while
//! still autovectorizing.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dot product with a fixed 4-accumulator reassociation.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let head = n - n % 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < head {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s2) + (s1 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

/// `c += alpha * b` over whole rows; plain elementwise loop, vectorizes.
#[inline]
fn axpy(c: &mut [f64], alpha: f64, b: &[f64]) {
    debug_assert_eq!(c.len(), b.len());
    for (ci, bi) in c.iter_mut().zip(b) {
        *ci += alpha * bi;
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Single row from a slice.
    pub fn row_vector(data: &[f64]) -> Self {
        Tensor { rows: 1, cols: data.len(), data: data.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows * self.cols != 1 {
            return Err(Error::Dimension {
                op: "item",
                detail: format!("expected 1x1, got {}x{}", self.rows, self.cols),
            });
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer with a new shape of identical element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!(
                    "cannot view {}x{} as {rows}x{cols}",
                    self.rows, self.cols
                ),
            });
        }
        Ok(Tensor { rows, cols, data: self.data.clone() })
    }

    /// `self * other`: [m,k] x [k,n] -> [m,n].
    pub fn matmul_nn(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul_nn",
                detail: format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                axpy(out_row, a, other.row(k));
            }
        }
        Ok(out)
    }

    /// `self * other^T`: [m,k] x [n,k] -> [m,n]. Rows dot rows, so both
    /// operands stream contiguously.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_nt",
                detail: format!("{}x{} * ({}x{})^T", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other`: [m,k]^T x [m,n] -> [k,n].
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "matmul_tn",
                detail: format!("({}x{})^T * {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor::zeros(self.cols, other.cols);
        for m in 0..self.rows {
            let a_row = self.row(m);
            let b_row = other.row(m);
            for (i, &a) in a_row.iter().enumerate() {
                axpy(out.row_mut(i), a, b_row);
            }
        }
        Ok(out)
    }

    /// Column sums as a [1, cols] tensor.
    pub fn col_sums(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            axpy(out.row_mut(0), 1.0, self.row(r));
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_assign",
                detail: format!("{:?} += {:?}", self.shape(), other.shape()),
            });
        }
        axpy(&mut self.data, 1.0, &other.data);
        Ok(())
    }
}

/// Fused dense layer: `x * w^T + b` broadcast over rows.
/// `x` is [batch, in], `w` is [out, in], `b` is [1, out].
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.cols() != w.cols() || b.rows() != 1 || b.cols() != w.rows() {
        return Err(Error::Dimension {
            op: "affine",
            detail: format!(
                "x {}x{}, w {}x{}, b {}x{}",
                x.rows(), x.cols(), w.rows(), w.cols(), b.rows(), b.cols()
            ),
        });
    }
    let mut out = Tensor::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let x_row = x.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(x_row, w.row(j)) + b.get(0, j);
        }
    }
    Ok(out)
}

/// Rectifier applied elementwise; shared by the tape and plain forwards.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}
