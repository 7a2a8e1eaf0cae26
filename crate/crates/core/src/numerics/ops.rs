use crate::error::{Error, Result};

use super::tensor::{mat_vec_t_acc, outer_acc, vec_mat_acc, ParamGrad, Tensor2};

/// `y = x·W + b`, with `b` broadcast over rows.
pub fn affine(x: &Tensor2, w: &ParamGrad, b: &ParamGrad) -> Result<Tensor2> {
    check_affine(x, w, b)?;
    let mut y = Tensor2::zeros(x.rows(), w.value.cols());
    for r in 0..x.rows() {
        let out = y.row_mut(r);
        out.copy_from_slice(b.value.data());
        vec_mat_acc(x.row(r), &w.value, out);
    }
    Ok(y)
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ_rows dy` and returns `dx = dy·Wᵀ`.
pub fn affine_backward(
    x: &Tensor2,
    dy: &Tensor2,
    w: &mut ParamGrad,
    b: &mut ParamGrad,
) -> Result<Tensor2> {
    check_affine(x, w, b)?;
    if dy.shape() != (x.rows(), w.value.cols()) {
        return Err(Error::dim("affine_backward", dy.shape(), (x.rows(), w.value.cols())));
    }
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        if let Some(g) = w.grad_mut() {
            outer_acc(g, x.row(r), dy.row(r));
        }
        if let Some(g) = b.grad_mut() {
            super::tensor::add_into(g.data_mut(), dy.row(r));
        }
        mat_vec_t_acc(&w.value, dy.row(r), dx.row_mut(r));
    }
    Ok(dx)
}

fn check_affine(x: &Tensor2, w: &ParamGrad, b: &ParamGrad) -> Result<()> {
    if x.cols() != w.value.rows() {
        return Err(Error::dim("affine", x.shape(), w.shape()));
    }
    if b.shape() != (1, w.value.cols()) {
        return Err(Error::dim("affine bias", b.shape(), (1, w.value.cols())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Row-wise.
    Softmax,
    /// Row-wise.
    LogSoftmax,
}

pub fn activation(kind: Activation, x: &Tensor2) -> Result<Tensor2> {
    x.check_finite("activation input")?;
    let mut y = x.clone();
    match kind {
        Activation::Tanh => y.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Softmax | Activation::LogSoftmax => {
            if x.cols() == 0 {
                return Err(Error::Domain("softmax over an empty row".into()));
            }
            for r in 0..y.rows() {
                if kind == Activation::Softmax {
                    softmax_in_place(y.row_mut(r));
                } else {
                    log_softmax_in_place(y.row_mut(r));
                }
            }
        }
    }
    Ok(y)
}

/// Gradient w.r.t. the input given the forward output `y` and upstream `dy`.
pub fn activation_backward(kind: Activation, y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("activation_backward", y.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    match kind {
        Activation::Tanh => {
            for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= 1.0 - yv * yv;
            }
        }
        Activation::Sigmoid => {
            for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= yv * (1.0 - yv);
            }
        }
        Activation::Softmax => {
            for r in 0..y.rows() {
                let yr = y.row(r);
                let s: f64 = yr.iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
                for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                    *d = yv * (*d - s);
                }
            }
        }
        Activation::LogSoftmax => {
            for r in 0..y.rows() {
                let s: f64 = dy.row(r).iter().sum();
                for (d, &lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                    *d -= lp.exp() * s;
                }
            }
        }
    }
    Ok(dx)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, accurate in both tails.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    log_softmax_in_place(&mut out);
    out
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
