//! Standard four-gate LSTM cell with explicit backpropagation through time.
//!
//! Gate layout inside the fused `4·hidden` pre-activation is `[i, f, g, o]`.

use rand::Rng;

use crate::error::{Error, Result};

use super::ops::sigmoid;
use super::tensor::{mat_vec_t_acc, outer_acc, vec_mat_acc, ParamGrad, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// input × 4·hidden
    pub w_x: ParamGrad,
    /// hidden × 4·hidden
    pub w_h: ParamGrad,
    /// 1 × 4·hidden
    pub b: ParamGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: ParamGrad::zeros(input, 4 * hidden),
            w_h: ParamGrad::zeros(hidden, 4 * hidden),
            b: ParamGrad::zeros(1, 4 * hidden),
        }
    }

    /// Weights uniform in `[-scale, scale]`, bias zero.
    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            w_x: ParamGrad::new(Tensor2::uniform(input, 4 * hidden, -scale, scale, rng)),
            w_h: ParamGrad::new(Tensor2::uniform(hidden, 4 * hidden, -scale, scale, rng)),
            b: ParamGrad::zeros(1, 4 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.value.rows()
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut ParamGrad); 3] {
        [("w_x", &mut self.w_x), ("w_h", &mut self.w_h), ("b", &mut self.b)]
    }

    pub fn params(&self) -> [(&'static str, &ParamGrad); 3] {
        [("w_x", &self.w_x), ("w_h", &self.w_h), ("b", &self.b)]
    }
}

/// Activated gates of one step, kept for the backward pass.
#[derive(Debug, Clone)]
struct StepTrace {
    gates: Vec<f64>,
    c: Vec<f64>,
}

fn step_impl(p: &LstmParams, state: &LstmState, x: &[f64]) -> (LstmState, StepTrace) {
    let hidden = p.hidden_dim();
    let mut z = p.b.value.data().to_vec();
    vec_mat_acc(x, &p.w_x.value, &mut z);
    vec_mat_acc(&state.h, &p.w_h.value, &mut z);
    for j in 0..hidden {
        z[j] = sigmoid(z[j]);
        z[hidden + j] = sigmoid(z[hidden + j]);
        z[2 * hidden + j] = z[2 * hidden + j].tanh();
        z[3 * hidden + j] = sigmoid(z[3 * hidden + j]);
    }
    let mut c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        c[j] = z[hidden + j] * state.c[j] + z[j] * z[2 * hidden + j];
        h[j] = z[3 * hidden + j] * c[j].tanh();
    }
    (
        LstmState { h, c: c.clone() },
        StepTrace { gates: z, c },
    )
}

fn check_dims(p: &LstmParams, state: &LstmState, x_len: usize) -> Result<()> {
    let hidden = p.hidden_dim();
    if state.h.len() != hidden || state.c.len() != hidden {
        return Err(Error::dim("lstm state", (1, state.h.len()), (1, hidden)));
    }
    if x_len != p.input_dim() {
        return Err(Error::dim("lstm input", (1, x_len), (1, p.input_dim())));
    }
    Ok(())
}

/// One time step; returns the new state and the step output (`h'`).
pub fn recurrent_cell_step(
    state: &LstmState,
    x_t: &[f64],
    params: &LstmParams,
) -> Result<(LstmState, Vec<f64>)> {
    check_dims(params, state, x_t.len())?;
    let (next, _) = step_impl(params, state, x_t);
    let y = next.h.clone();
    Ok((next, y))
}

/// Everything the backward pass needs from a forward run over a sequence.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    inputs: Tensor2,
    outputs: Tensor2,
    steps: Vec<StepTrace>,
}

/// Runs the cell over every row of `xs` from a zero state.
pub fn lstm_sequence(params: &LstmParams, xs: &Tensor2) -> Result<(Tensor2, LstmTrace)> {
    let hidden = params.hidden_dim();
    let mut state = LstmState::zeros(hidden);
    check_dims(params, &state, xs.cols())?;
    let mut outputs = Tensor2::zeros(xs.rows(), hidden);
    let mut steps = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let (next, trace) = step_impl(params, &state, xs.row(t));
        outputs.row_mut(t).copy_from_slice(&next.h);
        steps.push(trace);
        state = next;
    }
    let trace = LstmTrace {
        inputs: xs.clone(),
        outputs: outputs.clone(),
        steps,
    };
    Ok((outputs, trace))
}

/// Backpropagation through time. Accumulates parameter gradients (unless frozen)
/// and returns the gradient w.r.t. the input sequence.
pub fn lstm_sequence_backward(
    params: &mut LstmParams,
    trace: &LstmTrace,
    d_outputs: &Tensor2,
) -> Result<Tensor2> {
    let hidden = params.hidden_dim();
    if d_outputs.shape() != trace.outputs.shape() {
        return Err(Error::dim("lstm backward", d_outputs.shape(), trace.outputs.shape()));
    }
    let steps = trace.steps.len();
    let mut dxs = Tensor2::zeros(steps, params.input_dim());
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let zeros = vec![0.0; hidden];
    let mut dz = vec![0.0; 4 * hidden];
    for t in (0..steps).rev() {
        let st = &trace.steps[t];
        let g = &st.gates;
        let c_prev = if t > 0 { &trace.steps[t - 1].c } else { &zeros };
        let h_prev = if t > 0 { trace.outputs.row(t - 1) } else { &zeros[..] };
        let dy = d_outputs.row(t);
        for j in 0..hidden {
            let (i, f, gg, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
            let dh = dy[j] + dh_next[j];
            let tc = st.c[j].tanh();
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * gg * i * (1.0 - i);
            dz[hidden + j] = dc * c_prev[j] * f * (1.0 - f);
            dz[2 * hidden + j] = dc * i * (1.0 - gg * gg);
            dz[3 * hidden + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        if let Some(gw) = params.w_x.grad_mut() {
            outer_acc(gw, trace.inputs.row(t), &dz);
        }
        if let Some(gw) = params.w_h.grad_mut() {
            outer_acc(gw, h_prev, &dz);
        }
        if let Some(gb) = params.b.grad_mut() {
            super::tensor::add_into(gb.data_mut(), &dz);
        }
        mat_vec_t_acc(&params.w_x.value, &dz, dxs.row_mut(t));
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_t_acc(&params.w_h.value, &dz, &mut dh_next);
    }
    Ok(dxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_give_zero_output() {
        let p = LstmParams::zeros(3, 4);
        let (s, y) = recurrent_cell_step(&LstmState::zeros(4), &[0.0; 3], &p).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(s.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = LstmParams::zeros(3, 4);
        assert!(recurrent_cell_step(&LstmState::zeros(4), &[0.0; 2], &p).is_err());
        assert!(recurrent_cell_step(&LstmState::zeros(5), &[0.0; 3], &p).is_err());
    }

    #[test]
    fn identical_sequences_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::uniform(3, 4, 0.5, &mut rng);
        let xs = Tensor2::uniform(6, 3, -1.0, 1.0, &mut rng);
        let (a, _) = lstm_sequence(&p, &xs).unwrap();
        let (b, _) = lstm_sequence(&p, &xs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_matches_repeated_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::uniform(3, 4, 0.5, &mut rng);
        let xs = Tensor2::uniform(5, 3, -1.0, 1.0, &mut rng);
        let (out, _) = lstm_sequence(&p, &xs).unwrap();
        let mut s = LstmState::zeros(4);
        for t in 0..5 {
            let (n, y) = recurrent_cell_step(&s, xs.row(t), &p).unwrap();
            assert_eq!(out.row(t), &y[..]);
            s = n;
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = LstmParams::uniform(3, 4, 0.8, &mut rng);
        p.b = ParamGrad::new(Tensor2::uniform(1, 16, -0.5, 0.5, &mut rng));
        let xs = Tensor2::uniform(5, 3, -1.0, 1.0, &mut rng);
        let (out, trace) = lstm_sequence(&p, &xs).unwrap();
        // gradient of the summed outputs
        let ones = Tensor2::new(out.rows(), out.cols(), vec![1.0; out.data().len()]).unwrap();
        let dxs = lstm_sequence_backward(&mut p, &trace, &ones).unwrap();
        let summed = |p: &LstmParams, xs: &Tensor2| -> Result<f64> {
            Ok(lstm_sequence(p, xs)?.0.data().iter().sum())
        };

        let base = p.clone();
        for which in 0..3 {
            let (values, grads) = {
                let pg = base.params()[which].1;
                (pg.value.clone(), pg.grad.clone())
            };
            let err = finite_difference_check(values.data(), grads.data(), 1e-4, |v| {
                let mut q = base.clone();
                q.params_mut()[which].1.value = Tensor2::new(values.rows(), values.cols(), v.to_vec())?;
                summed(&q, &xs)
            })
            .unwrap();
            assert!(err < 1e-4, "param {which}: {err}");
        }
        let err_x = finite_difference_check(xs.data(), dxs.data(), 1e-4, |v| {
            summed(&base, &Tensor2::new(5, 3, v.to_vec())?)
        })
        .unwrap();
        assert!(err_x < 1e-4, "{err_x}");
    }
}
