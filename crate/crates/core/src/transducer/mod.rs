//! Transducer loss over a `T × (U+1)` lattice.
//!
//! A path starts at `(0, 0)`. A blank at `(t, u)` moves to `(t+1, u)`, a label
//! at `(t, u)` emits target `u+1` and moves to `(t, u+1)` without consuming a
//! frame. Every path ends with the blank taken at `(T-1, U)`.

mod loss;

pub use loss::{
    asr_lattice, asr_loss, aux_lattice, aux_loss, aux_loss_cached, sequence_loss, FrozenAsrCache, LossOptions,
    LossWeights, SequenceLoss,
};

use crate::error::{Error, Result};
use crate::numerics::{logaddexp, Tensor2};

/// Largest `T + U` the enumeration oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 14;

/// Log-probabilities of the two transitions available at every lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    /// `T × (U+1)`: `ln b(t,u)`
    blank_lp: Tensor2,
    /// `T × U`: `ln[(1 - b(t,u)) · P(y_{u+1} | t, u)]`
    label_lp: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// `-ln P(target | input)`
    pub loss: f64,
    /// `∂loss / ∂blank_lp`, `T × (U+1)`
    pub grad_blank: Tensor2,
    /// `∂loss / ∂label_lp`, `T × U`
    pub grad_label: Tensor2,
}

impl LogProbLattice {
    pub fn new(blank_lp: Tensor2, label_lp: Tensor2) -> Result<Self> {
        let (t, u1) = blank_lp.shape();
        if t == 0 || u1 == 0 {
            return Err(Error::Domain("lattice needs at least one frame".into()));
        }
        if label_lp.shape() != (t, u1 - 1) {
            return Err(Error::dim("lattice", blank_lp.shape(), label_lp.shape()));
        }
        blank_lp.check_finite("blank log-probs")?;
        label_lp.check_finite("label log-probs")?;
        const TOL: f64 = 1e-9;
        for ti in 0..t {
            for ui in 0..u1 {
                let b = blank_lp.get(ti, ui);
                let l = if ui + 1 < u1 { label_lp.get(ti, ui) } else { f64::NEG_INFINITY };
                if b > TOL || l > TOL || b.exp() + l.exp() > 1.0 + TOL {
                    return Err(Error::Numeric(format!(
                        "lattice point ({ti}, {ui}) is not a sub-distribution: blank {b}, label {l}"
                    )));
                }
            }
        }
        Ok(Self { blank_lp, label_lp })
    }

    pub fn frames(&self) -> usize {
        self.blank_lp.rows()
    }

    pub fn target_len(&self) -> usize {
        self.label_lp.cols()
    }

    pub fn blank_lp(&self) -> &Tensor2 {
        &self.blank_lp
    }

    pub fn label_lp(&self) -> &Tensor2 {
        &self.label_lp
    }
}

/// Log-space forward–backward; returns the loss and its gradient w.r.t. every
/// lattice entry (the negated transition occupancies).
pub fn forward_backward(lat: &LogProbLattice) -> Result<LossResult> {
    let t_len = lat.frames();
    let u_len = lat.target_len();
    let blank = &lat.blank_lp;
    let label = &lat.label_lp;

    let mut alpha = Tensor2::zeros(t_len, u_len + 1);
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha.get(t - 1, u) + blank.get(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha.get(t, u - 1) + label.get(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            alpha.set(t, u, logaddexp(from_blank, from_label));
        }
    }

    let mut beta = Tensor2::zeros(t_len, u_len + 1);
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let v = if t == t_len - 1 && u == u_len {
                blank.get(t, u)
            } else {
                let via_blank = if t + 1 < t_len {
                    blank.get(t, u) + beta.get(t + 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u < u_len {
                    label.get(t, u) + beta.get(t, u + 1)
                } else {
                    f64::NEG_INFINITY
                };
                logaddexp(via_blank, via_label)
            };
            beta.set(t, u, v);
        }
    }

    let log_p = alpha.get(t_len - 1, u_len) + blank.get(t_len - 1, u_len);
    if !log_p.is_finite() {
        return Err(Error::Numeric("target sequence has zero probability".into()));
    }

    let mut grad_blank = Tensor2::zeros(t_len, u_len + 1);
    let mut grad_label = Tensor2::zeros(t_len, u_len);
    for t in 0..t_len {
        for u in 0..=u_len {
            let a = alpha.get(t, u);
            let next = if t + 1 < t_len {
                Some(beta.get(t + 1, u))
            } else if u == u_len {
                Some(0.0)
            } else {
                None
            };
            if let Some(nb) = next {
                grad_blank.set(t, u, -(a + blank.get(t, u) + nb - log_p).exp());
            }
            if u < u_len {
                grad_label.set(t, u, -(a + label.get(t, u) + beta.get(t, u + 1) - log_p).exp());
            }
        }
    }

    Ok(LossResult {
        loss: -log_p,
        grad_blank,
        grad_label,
    })
}

/// Sums the probability of every alignment by explicit enumeration.
pub fn brute_force_loss(lat: &LogProbLattice) -> Result<f64> {
    let (t_len, u_len) = (lat.frames(), lat.target_len());
    if t_len + u_len > BRUTE_FORCE_LIMIT {
        return Err(Error::Domain(format!(
            "enumeration refused: T + U = {} exceeds {BRUTE_FORCE_LIMIT}",
            t_len + u_len
        )));
    }
    let mut total = 0.0;
    enumerate(lat, 0, 0, 1.0, &mut |p| total += p);
    Ok(-total.ln())
}

/// Number of valid alignments, walking the same move rules the oracle uses.
pub fn path_count(frames: usize, target_len: usize) -> Result<u64> {
    if frames == 0 {
        return Err(Error::Domain("lattice needs at least one frame".into()));
    }
    if frames + target_len > BRUTE_FORCE_LIMIT {
        return Err(Error::Domain("enumeration refused".into()));
    }
    fn walk(t: usize, u: usize, t_len: usize, u_len: usize) -> u64 {
        if t == t_len - 1 && u == u_len {
            return 1;
        }
        let mut n = 0;
        if t + 1 < t_len {
            n += walk(t + 1, u, t_len, u_len);
        }
        if u < u_len {
            n += walk(t, u + 1, t_len, u_len);
        }
        n
    }
    Ok(walk(0, 0, frames, target_len))
}

fn enumerate(lat: &LogProbLattice, t: usize, u: usize, prob: f64, sink: &mut dyn FnMut(f64)) {
    let (t_len, u_len) = (lat.frames(), lat.target_len());
    if t == t_len - 1 && u == u_len {
        sink(prob * lat.blank_lp.get(t, u).exp());
        return;
    }
    if t + 1 < t_len {
        enumerate(lat, t + 1, u, prob * lat.blank_lp.get(t, u).exp(), sink);
    }
    if u < u_len {
        enumerate(lat, t, u + 1, prob * lat.label_lp.get(t, u).exp(), sink);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_lattice<R: Rng>(t: usize, u: usize, rng: &mut R) -> LogProbLattice {
        let mut blank = Tensor2::zeros(t, u + 1);
        let mut label = Tensor2::zeros(t, u);
        for ti in 0..t {
            for ui in 0..=u {
                let b: f64 = rng.random_range(0.05..0.95);
                blank.set(ti, ui, b.ln());
                if ui < u {
                    let q: f64 = rng.random_range(0.05..1.0);
                    label.set(ti, ui, ((1.0 - b) * q).ln());
                }
            }
        }
        LogProbLattice::new(blank, label).unwrap()
    }

    fn uniform_lattice(t: usize, u: usize, blank: f64, label: f64) -> LogProbLattice {
        let mut b = Tensor2::zeros(t, u + 1);
        b.fill(blank);
        let mut l = Tensor2::zeros(t, u);
        l.fill(label);
        LogProbLattice::new(b, l).unwrap()
    }

    #[test]
    fn two_frames_one_label() {
        // b = 0.5 and the correct label has probability 0.5: both alignments weigh 0.0625
        let lat = uniform_lattice(2, 1, 0.5f64.ln(), 0.25f64.ln());
        let r = forward_backward(&lat).unwrap();
        assert!((r.loss - (-(0.125f64).ln())).abs() < 1e-12);
        assert!((r.loss - 2.0794).abs() < 1e-4);
        assert_eq!(path_count(2, 1).unwrap(), 2);
    }

    #[test]
    fn empty_target_and_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_lattice(4, 0, &mut rng);
        let r = forward_backward(&lat).unwrap();
        let expect: f64 = -(0..4).map(|t| lat.blank_lp().get(t, 0)).sum::<f64>();
        assert!((r.loss - expect).abs() < 1e-12);
        assert_eq!(path_count(3, 0).unwrap(), 1);

        let lat = random_lattice(1, 1, &mut rng);
        let r = forward_backward(&lat).unwrap();
        let expect = -(lat.label_lp().get(0, 0) + lat.blank_lp().get(0, 1));
        assert!((r.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_random_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = rng.random_range(1..=5);
            let u = rng.random_range(0..=5);
            let lat = random_lattice(t, u, &mut rng);
            let dp = forward_backward(&lat).unwrap().loss;
            let bf = brute_force_loss(&lat).unwrap();
            assert!((dp - bf).abs() < 1e-10, "T={t} U={u}: {dp} vs {bf}");
        }
    }

    #[test]
    fn path_counts_are_binomial() {
        fn binom(n: u64, k: u64) -> u64 {
            (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
        }
        for t in 1..=5u64 {
            for u in 0..=5u64 {
                assert_eq!(path_count(t as usize, u as usize).unwrap(), binom(t + u - 1, u));
            }
        }
    }

    #[test]
    fn enumeration_bound_is_enforced() {
        let lat = uniform_lattice(8, 7, 0.5f64.ln(), 0.25f64.ln());
        assert!(matches!(brute_force_loss(&lat), Err(Error::Domain(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(4, 3, &mut rng);
        let r = forward_backward(&lat).unwrap();
        let eps = 1e-6;
        let loss_of = |b: Tensor2, l: Tensor2| {
            // unnormalized perturbations are fine for the DP itself
            let lat = LogProbLattice { blank_lp: b, label_lp: l };
            forward_backward(&lat).unwrap().loss
        };
        for i in 0..lat.blank_lp.data().len() {
            let mut p = lat.blank_lp.clone();
            p.data_mut()[i] += eps;
            let mut m = lat.blank_lp.clone();
            m.data_mut()[i] -= eps;
            let num = (loss_of(p, lat.label_lp.clone()) - loss_of(m, lat.label_lp.clone())) / (2.0 * eps);
            assert!(relative_error(r.grad_blank.data()[i], num) < 1e-6, "blank {i}");
        }
        for i in 0..lat.label_lp.data().len() {
            let mut p = lat.label_lp.clone();
            p.data_mut()[i] += eps;
            let mut m = lat.label_lp.clone();
            m.data_mut()[i] -= eps;
            let num = (loss_of(lat.blank_lp.clone(), p) - loss_of(lat.blank_lp.clone(), m)) / (2.0 * eps);
            assert!(relative_error(r.grad_label.data()[i], num) < 1e-6, "label {i}");
        }
    }

    #[test]
    fn occupancies_are_conserved() {
        // every path crosses each frame boundary by exactly one blank and emits each label once
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(5, 4, &mut rng);
        let r = forward_backward(&lat).unwrap();
        for t in 0..5 {
            let s: f64 = (0..=4).map(|u| -r.grad_blank.get(t, u)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for u in 0..4 {
            let s: f64 = (0..5).map(|t| -r.grad_label.get(t, u)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(r.loss >= 0.0);
    }

    #[test]
    fn rejects_bad_lattices() {
        let mut b = Tensor2::zeros(2, 2);
        b.set(0, 0, f64::NAN);
        assert!(matches!(
            LogProbLattice::new(b, Tensor2::zeros(2, 1)),
            Err(Error::Numeric(_))
        ));
        assert!(LogProbLattice::new(Tensor2::zeros(2, 2), Tensor2::zeros(2, 2)).is_err());
        assert!(LogProbLattice::new(Tensor2::zeros(0, 1), Tensor2::zeros(0, 0)).is_err());
        // blank and label both certain at the same point
        assert!(LogProbLattice::new(Tensor2::zeros(1, 2), Tensor2::zeros(1, 1)).is_err());
    }

    #[test]
    fn long_lattice_does_not_underflow() {
        let lat = uniform_lattice(400, 60, 0.3f64.ln(), 0.05f64.ln());
        let r = forward_backward(&lat).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert!(r.grad_blank.is_finite() && r.grad_label.is_finite());
    }
}
