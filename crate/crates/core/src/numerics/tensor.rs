use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("tensor", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim("from_rows", (i, r.len()), (0, cols)));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2 {
        Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            vec_mat_acc(self.row(r), other, out.row_mut(r));
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim("add", self.shape(), other.shape()));
        }
        add_into(&mut self.data, &other.data);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out += x · W` for a row vector `x`.
pub(crate) fn vec_mat_acc(x: &[f64], w: &Tensor2, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
}

/// `out += W · d` (multiplication by the transpose of a row-major `W`).
pub(crate) fn mat_vec_t_acc(w: &Tensor2, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(d.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (k, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(k), d);
    }
}

/// `g += xᵀ · d` for row vectors `x`, `d`.
pub(crate) fn outer_acc(g: &mut Tensor2, x: &[f64], d: &[f64]) {
    debug_assert_eq!(g.rows, x.len());
    debug_assert_eq!(g.cols, d.len());
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (gv, dv) in g.row_mut(k).iter_mut().zip(d) {
            *gv += xk * dv;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub value: Tensor2,
    pub grad: Tensor2,
    pub frozen: bool,
}

impl ParamGrad {
    pub fn new(value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Tensor2::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Gradient accumulator, or `None` when frozen so backward passes skip it.
    pub fn grad_mut(&mut self) -> Option<&mut Tensor2> {
        if self.frozen {
            None
        } else {
            Some(&mut self.grad)
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
