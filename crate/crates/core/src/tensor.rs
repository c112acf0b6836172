//! Dense row-major matrices and the small set of kernels the network needs.
//!
//! Products go through `matrixmultiply`'s gemm, which takes arbitrary strides,
//! so the transposed variants never materialise a transpose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-link outputs are clamped to `[-ETA_MAX, ETA_MAX]` before `exp`.
pub const ETA_MAX: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn plain(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    fn transposed(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.cols,
            cols: m.rows,
            rs: 1,
            cs: m.cols as isize,
        }
    }
}

/// `c = alpha * a * b + beta * c`; shapes already checked by callers.
fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((c.rows, c.cols), (a.rows, b.cols));
    if c.data.is_empty() {
        return;
    }
    if a.cols == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the views and `c` are backed by slices whose lengths cover
    // every (row, col) addressed through the given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

fn check_inner(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<()> {
    if lhs.1 != rhs.0 {
        return Err(Error::dim(
            op,
            format!("{}x{} times {}x{}", lhs.0, lhs.1, rhs.0, rhs.1),
        ));
    }
    Ok(())
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a.shape(), b.shape())?;
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, View::plain(a), View::plain(b), 0.0, &mut c);
    Ok(c)
}

/// `a * bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_nt", a.shape(), (b.cols, b.rows))?;
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, View::plain(a), View::transposed(b), 0.0, &mut c);
    Ok(c)
}

/// `acc += aᵀ * b`, the shape of a weight gradient accumulated over a batch.
pub fn matmul_tn_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    check_inner("matmul_tn_acc", (a.cols, a.rows), b.shape())?;
    if acc.shape() != (a.cols, b.cols) {
        return Err(Error::dim(
            "matmul_tn_acc",
            format!("accumulator {:?}, product {}x{}", acc.shape(), a.cols, b.cols),
        ));
    }
    gemm(1.0, View::transposed(a), View::plain(b), 1.0, acc);
    Ok(())
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Indicator of `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_grad(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Inverse exponential link with the pre-link value clamped to `±ETA_MAX`.
#[inline]
pub fn exp_link(eta: f64) -> f64 {
    eta.clamp(-ETA_MAX, ETA_MAX).exp()
}

/// `d exp_link / d eta`, zero where the clamp is active.
#[inline]
pub fn exp_link_grad(eta: f64) -> f64 {
    if eta.abs() > ETA_MAX {
        0.0
    } else {
        eta.exp()
    }
}

#[inline]
pub fn link_clamped(eta: f64) -> bool {
    eta.abs() > ETA_MAX
}

/// Gradient accumulators, one matrix per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTape {
    slots: Vec<Matrix>,
}

impl GradTape {
    pub fn zeros(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            slots: shapes
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        self.slots.iter_mut().for_each(|s| s.fill(0.0));
    }

    pub fn slots(&self) -> &[Matrix] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &Matrix {
        &self.slots[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.slots[i]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.slots.iter().map(Matrix::shape).collect()
    }

    /// Adds `other` slot by slot.
    pub fn merge(&mut self, other: &GradTape) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::dim(
                "GradTape::merge",
                format!("{} slots vs {}", self.slots.len(), other.slots.len()),
            ));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_scaled(b, 1.0)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in &mut self.slots {
            s.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.as_slice().iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(Matrix::is_finite)
    }
}
