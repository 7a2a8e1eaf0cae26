//! Transducer losses of the model: the wordpiece loss used to pre-train the ASR
//! side and the speaker-label loss whose blank term is the shared ASR blank.

use serde::{Deserialize, Serialize};

use super::{forward_backward, LogProbLattice, LossResult};
use crate::error::{Error, Result};
use crate::model::{JointParams, ModelParams};
use crate::numerics::{
    add_into, dot, log_sigmoid, log_softmax, mat_vec_t_acc, outer_acc, sigmoid, vec_mat_acc, Tensor2,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub asr: f64,
    pub aux: f64,
}

impl LossWeights {
    pub const ASR_ONLY: LossWeights = LossWeights { asr: 1.0, aux: 0.0 };
    pub const AUX_ONLY: LossWeights = LossWeights { asr: 0.0, aux: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Let the speaker loss push gradients through the shared blank logit into
    /// the ASR joint. Off by default; irrelevant while the ASR side is frozen.
    pub aux_blank_gradient: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::AUX_ONLY,
            aux_blank_gradient: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceLoss {
    pub asr: Option<f64>,
    pub aux: Option<f64>,
    pub total: f64,
}

/// ASR-side quantities the speaker loss reads. Constant while the ASR side is
/// frozen, so training can compute them once per utterance.
#[derive(Debug, Clone)]
pub struct FrozenAsrCache {
    pub tap: Tensor2,
    /// Predictor outputs `g_0..g_U`.
    pub predictor: Tensor2,
    /// ASR blank logit `s[0]` at every `(t, u)`.
    pub blank_logits: Tensor2,
}

impl FrozenAsrCache {
    pub fn build(params: &ModelParams, features: &Tensor2, wordpieces: &[usize]) -> Result<Self> {
        let fw = asr_forward(params, features, wordpieces, false)?;
        Ok(Self {
            tap: fw.tap,
            predictor: fw.g,
            blank_logits: fw.s0,
        })
    }

    pub fn frames(&self) -> usize {
        self.tap.rows()
    }

    pub fn target_len(&self) -> usize {
        self.predictor.rows() - 1
    }
}

fn check_targets(params: &ModelParams, wordpieces: &[usize], speakers: Option<&[usize]>) -> Result<()> {
    let v = params.config.vocab_size;
    if let Some(&bad) = wordpieces.iter().find(|&&w| w == 0 || w >= v) {
        return Err(Error::Range {
            what: "wordpiece id",
            value: bad,
            limit: v,
        });
    }
    if let Some(spk) = speakers {
        if spk.len() != wordpieces.len() {
            return Err(Error::Invalid(format!(
                "speaker targets ({}) and wordpiece targets ({}) differ in length",
                spk.len(),
                wordpieces.len()
            )));
        }
        check_speakers(params, spk)?;
    }
    Ok(())
}

fn check_speakers(params: &ModelParams, speakers: &[usize]) -> Result<()> {
    let n = params.config.max_speakers;
    if let Some(&bad) = speakers.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::Range {
            what: "speaker id",
            value: bad,
            limit: n,
        });
    }
    Ok(())
}

/// `f·P` per row and `g·Q + b_h` per row.
fn joint_projections(joint: &JointParams, f: &Tensor2, g: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let pf = f.matmul(&joint.p.value)?;
    let mut qg = g.matmul(&joint.q.value)?;
    for u in 0..qg.rows() {
        add_into(qg.row_mut(u), joint.b_h.value.data());
    }
    Ok((pf, qg))
}

/// Column 0 of `A` (the blank row of the output projection).
fn blank_column(joint: &JointParams) -> Vec<f64> {
    (0..joint.a.value.rows()).map(|k| joint.a.value.get(k, 0)).collect()
}

struct AsrForward {
    f: Tensor2,
    tap: Tensor2,
    encoder: Option<crate::model::EncoderTrace>,
    g: Tensor2,
    predictor: crate::model::PredictorTrace,
    s0: Tensor2,
    /// tanh(h) per lattice point, row-major over (t, u)
    th: Vec<f64>,
    /// softmax(s[1..]) per lattice point when the wordpiece loss is active
    probs: Option<Vec<f64>>,
    lattice: Option<LogProbLattice>,
}

fn asr_forward(params: &ModelParams, features: &Tensor2, wordpieces: &[usize], full: bool) -> Result<AsrForward> {
    let (f, tap, encoder) = params.asr_encode_traced(features)?;
    let (g, predictor) = params.predictor_outputs(wordpieces)?;
    let joint = &params.asr_joint;
    let (pf, qg) = joint_projections(joint, &f, &g)?;
    let (t_len, u_len) = (f.rows(), wordpieces.len());
    let d_h = joint.a.value.rows();
    let vocab = joint.a.value.cols();
    let a_blank = blank_column(joint);
    let b_blank = joint.b_s.value.get(0, 0);

    let mut s0 = Tensor2::zeros(t_len, u_len + 1);
    let mut th = vec![0.0; t_len * (u_len + 1) * d_h];
    let mut probs = full.then(|| vec![0.0; t_len * (u_len + 1) * (vocab - 1)]);
    let mut blank_lp = Tensor2::zeros(t_len, u_len + 1);
    let mut label_lp = Tensor2::zeros(t_len, u_len);
    let mut s = vec![0.0; vocab];
    for t in 0..t_len {
        for u in 0..=u_len {
            let idx = t * (u_len + 1) + u;
            let th_pt = &mut th[idx * d_h..(idx + 1) * d_h];
            for ((o, a), b) in th_pt.iter_mut().zip(pf.row(t)).zip(qg.row(u)) {
                *o = (a + b).tanh();
            }
            if let Some(probs) = probs.as_mut() {
                s.copy_from_slice(joint.b_s.value.data());
                vec_mat_acc(th_pt, &joint.a.value, &mut s);
                s0.set(t, u, s[0]);
                blank_lp.set(t, u, log_sigmoid(s[0]));
                let lsm = log_softmax(&s[1..]);
                if u < u_len {
                    label_lp.set(t, u, log_sigmoid(-s[0]) + lsm[wordpieces[u] - 1]);
                }
                for (p, l) in probs[idx * (vocab - 1)..(idx + 1) * (vocab - 1)].iter_mut().zip(&lsm) {
                    *p = l.exp();
                }
            } else {
                s0.set(t, u, dot(th_pt, &a_blank) + b_blank);
            }
        }
    }
    let lattice = if full {
        Some(LogProbLattice::new(blank_lp, label_lp)?)
    } else {
        None
    };
    Ok(AsrForward {
        f,
        tap,
        encoder: Some(encoder),
        g,
        predictor,
        s0,
        th,
        probs,
        lattice,
    })
}

struct AuxForward {
    f_aux: Tensor2,
    trace: crate::model::AuxTrace,
    th: Vec<f64>,
    probs: Vec<f64>,
    lattice: LogProbLattice,
}

fn aux_forward(params: &ModelParams, tap: &Tensor2, g: &Tensor2, s0: &Tensor2, speakers: &[usize]) -> Result<AuxForward> {
    let (f_aux, trace) = params.aux_encode_traced(tap)?;
    let joint = &params.aux_joint;
    let (pf, qg) = joint_projections(joint, &f_aux, g)?;
    let (t_len, u_len) = (f_aux.rows(), speakers.len());
    if s0.shape() != (t_len, u_len + 1) {
        return Err(Error::dim("aux lattice", s0.shape(), (t_len, u_len + 1)));
    }
    let d_h = joint.a.value.rows();
    let n = joint.a.value.cols();
    let mut th = vec![0.0; t_len * u_len * d_h];
    let mut probs = vec![0.0; t_len * u_len * n];
    let mut blank_lp = Tensor2::zeros(t_len, u_len + 1);
    let mut label_lp = Tensor2::zeros(t_len, u_len);
    let mut s = vec![0.0; n];
    for t in 0..t_len {
        for u in 0..=u_len {
            let sb = s0.get(t, u);
            blank_lp.set(t, u, log_sigmoid(sb));
            if u == u_len {
                continue;
            }
            let idx = t * u_len + u;
            let th_pt = &mut th[idx * d_h..(idx + 1) * d_h];
            for ((o, a), b) in th_pt.iter_mut().zip(pf.row(t)).zip(qg.row(u)) {
                *o = (a + b).tanh();
            }
            s.copy_from_slice(joint.b_s.value.data());
            vec_mat_acc(th_pt, &joint.a.value, &mut s);
            let lsm = log_softmax(&s);
            label_lp.set(t, u, log_sigmoid(-sb) + lsm[speakers[u] - 1]);
            for (p, l) in probs[idx * n..(idx + 1) * n].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
    }
    Ok(AuxForward {
        f_aux,
        trace,
        th,
        probs,
        lattice: LogProbLattice::new(blank_lp, label_lp)?,
    })
}

/// `∂loss/∂s0` at every point from the gradients w.r.t. `ln b` and `ln(1-b)·…`.
fn blank_logit_grad(s0: &Tensor2, r: &LossResult, weight: f64) -> Tensor2 {
    let (t_len, u1) = s0.shape();
    let mut d = Tensor2::zeros(t_len, u1);
    for t in 0..t_len {
        for u in 0..u1 {
            let b = sigmoid(s0.get(t, u));
            let gl = if u + 1 < u1 { r.grad_label.get(t, u) } else { 0.0 };
            d.set(t, u, weight * (r.grad_blank.get(t, u) * (1.0 - b) - gl * b));
        }
    }
    d
}

/// Joint backward given per-point output gradients. Accumulates into the joint
/// parameters and returns `(∂/∂f, ∂/∂g)`.
struct JointBackward<'a> {
    f: &'a Tensor2,
    g: &'a Tensor2,
    th: &'a [f64],
    /// number of `u` columns stored per frame in `th`
    u_cols: usize,
}

impl JointBackward<'_> {
    fn run(
        &self,
        joint: &mut JointParams,
        mut ds_at: impl FnMut(usize, usize, &mut [f64]) -> bool,
        out_dim: usize,
    ) -> Result<(Tensor2, Tensor2)> {
        let d_h = joint.a.value.rows();
        let t_len = self.f.rows();
        let mut dh_t = Tensor2::zeros(t_len, d_h);
        let mut dh_u = Tensor2::zeros(self.g.rows(), d_h);
        let mut ds = vec![0.0; out_dim];
        let mut dth = vec![0.0; d_h];
        for t in 0..t_len {
            for u in 0..self.u_cols {
                ds.iter_mut().for_each(|v| *v = 0.0);
                if !ds_at(t, u, &mut ds) {
                    continue;
                }
                let idx = t * self.u_cols + u;
                let th = &self.th[idx * d_h..(idx + 1) * d_h];
                if let Some(ga) = joint.a.grad_mut() {
                    outer_acc(ga, th, &ds);
                }
                if let Some(gb) = joint.b_s.grad_mut() {
                    add_into(gb.data_mut(), &ds);
                }
                dth.iter_mut().for_each(|v| *v = 0.0);
                mat_vec_t_acc(&joint.a.value, &ds, &mut dth);
                for (k, d) in dth.iter_mut().enumerate() {
                    *d *= 1.0 - th[k] * th[k];
                }
                add_into(dh_t.row_mut(t), &dth);
                add_into(dh_u.row_mut(u), &dth);
            }
        }
        for t in 0..t_len {
            if let Some(gp) = joint.p.grad_mut() {
                outer_acc(gp, self.f.row(t), dh_t.row(t));
            }
            if let Some(gb) = joint.b_h.grad_mut() {
                add_into(gb.data_mut(), dh_t.row(t));
            }
        }
        if let Some(gq) = joint.q.grad_mut() {
            for u in 0..dh_u.rows() {
                outer_acc(gq, self.g.row(u), dh_u.row(u));
            }
        }
        let d_f = dh_t.matmul(&joint.p.value.transpose())?;
        let d_g = dh_u.matmul(&joint.q.value.transpose())?;
        Ok((d_f, d_g))
    }
}

struct AuxBackward {
    loss: f64,
    d_tap: Tensor2,
    d_g: Tensor2,
    d_s0: Tensor2,
}

fn aux_backward(
    params: &mut ModelParams,
    fw: &AuxForward,
    g: &Tensor2,
    s0: &Tensor2,
    speakers: &[usize],
    weight: f64,
) -> Result<AuxBackward> {
    let r = forward_backward(&fw.lattice)?;
    let n = params.config.max_speakers;
    let u_len = speakers.len();
    let jb = JointBackward {
        f: &fw.f_aux,
        g,
        th: &fw.th,
        u_cols: u_len,
    };
    let (d_faux, d_g) = jb.run(
        &mut params.aux_joint,
        |t, u, ds| {
            let gl = weight * r.grad_label.get(t, u);
            if gl == 0.0 {
                return false;
            }
            let p = &fw.probs[(t * u_len + u) * n..(t * u_len + u + 1) * n];
            for (k, d) in ds.iter_mut().enumerate() {
                *d = gl * (f64::from(u8::from(k + 1 == speakers[u])) - p[k]);
            }
            true
        },
        n,
    )?;
    let d_tap = params.aux_encode_backward(&fw.trace, &d_faux)?;
    Ok(AuxBackward {
        loss: r.loss,
        d_tap,
        d_g,
        d_s0: blank_logit_grad(s0, &r, weight),
    })
}

/// Speaker-label loss from cached ASR quantities, accumulating gradients into
/// the auxiliary encoder and joint. Returns the loss.
pub fn aux_loss_cached(params: &mut ModelParams, cache: &FrozenAsrCache, speakers: &[usize]) -> Result<f64> {
    check_speakers(params, speakers)?;
    if speakers.len() != cache.target_len() {
        return Err(Error::Invalid("speaker targets do not match the cached wordpiece length".into()));
    }
    let fw = aux_forward(params, &cache.tap, &cache.predictor, &cache.blank_logits, speakers)?;
    Ok(aux_backward(params, &fw, &cache.predictor, &cache.blank_logits, speakers, 1.0)?.loss)
}

/// Full forward and backward for one utterance under the given loss weights.
/// Gradients accumulate into every unfrozen tensor.
pub fn sequence_loss(
    params: &mut ModelParams,
    features: &Tensor2,
    wordpieces: &[usize],
    speakers: &[usize],
    opts: &LossOptions,
) -> Result<SequenceLoss> {
    let w = opts.weights;
    let use_aux = w.aux != 0.0;
    let use_asr = w.asr != 0.0;
    check_targets(params, wordpieces, use_aux.then_some(speakers))?;
    if !use_aux && !use_asr {
        return Err(Error::Invalid("both loss weights are zero".into()));
    }

    let asr_fw = asr_forward(params, features, wordpieces, use_asr)?;

    let mut aux_loss = None;
    let mut aux_bw = None;
    if use_aux {
        let fw = aux_forward(params, &asr_fw.tap, &asr_fw.g, &asr_fw.s0, speakers)?;
        let bw = aux_backward(params, &fw, &asr_fw.g, &asr_fw.s0, speakers, w.aux)?;
        aux_loss = Some(bw.loss);
        aux_bw = Some(bw);
    }

    let asr_r = match &asr_fw.lattice {
        Some(lat) => Some(forward_backward(lat)?),
        None => None,
    };
    let asr_loss = asr_r.as_ref().map(|r| r.loss);

    if !params.asr_frozen() {
        let t_len = asr_fw.f.rows();
        let u_len = wordpieces.len();
        let vocab = params.config.vocab_size;
        let mut d_s0 = Tensor2::zeros(t_len, u_len + 1);
        if let Some(r) = &asr_r {
            d_s0.add_assign(&blank_logit_grad(&asr_fw.s0, r, w.asr))?;
        }
        if opts.aux_blank_gradient {
            if let Some(bw) = &aux_bw {
                d_s0.add_assign(&bw.d_s0)?;
            }
        }
        let jb = JointBackward {
            f: &asr_fw.f,
            g: &asr_fw.g,
            th: &asr_fw.th,
            u_cols: u_len + 1,
        };
        let probs = asr_fw.probs.as_deref();
        let (d_f, mut d_g) = jb.run(
            &mut params.asr_joint,
            |t, u, ds| {
                ds[0] = d_s0.get(t, u);
                let mut any = ds[0] != 0.0;
                if let (Some(r), Some(p)) = (&asr_r, probs) {
                    if u < u_len {
                        let gl = w.asr * r.grad_label.get(t, u);
                        let idx = t * (u_len + 1) + u;
                        let p = &p[idx * (vocab - 1)..(idx + 1) * (vocab - 1)];
                        for (k, d) in ds[1..].iter_mut().enumerate() {
                            *d = gl * (f64::from(u8::from(k + 1 == wordpieces[u])) - p[k]);
                        }
                        any |= gl != 0.0;
                    }
                }
                any
            },
            vocab,
        )?;
        if let Some(bw) = &aux_bw {
            d_g.add_assign(&bw.d_g)?;
        }
        let encoder = asr_fw.encoder.as_ref().expect("encoder trace");
        params.asr_encode_backward(encoder, &d_f, aux_bw.as_ref().map(|b| &b.d_tap))?;
        params.predictor_backward(&asr_fw.predictor, &d_g)?;
    }

    let total = w.asr * asr_loss.unwrap_or(0.0) + w.aux * aux_loss.unwrap_or(0.0);
    Ok(SequenceLoss {
        asr: asr_loss,
        aux: aux_loss,
        total,
    })
}

/// Speaker-label loss with the blank gradient blocked; gradients reach the
/// auxiliary network (and, when unfrozen, the ASR encoder and predictor through
/// the tap and `g`).
pub fn aux_loss(params: &mut ModelParams, features: &Tensor2, wordpieces: &[usize], speakers: &[usize]) -> Result<f64> {
    if params.asr_frozen() {
        check_targets(params, wordpieces, Some(speakers))?;
        let cache = FrozenAsrCache::build(params, features, wordpieces)?;
        return aux_loss_cached(params, &cache, speakers);
    }
    let r = sequence_loss(params, features, wordpieces, speakers, &LossOptions::default())?;
    Ok(r.total)
}

/// Wordpiece transducer loss, accumulating gradients into the ASR side.
pub fn asr_loss(params: &mut ModelParams, features: &Tensor2, wordpieces: &[usize]) -> Result<f64> {
    let opts = LossOptions {
        weights: LossWeights::ASR_ONLY,
        aux_blank_gradient: false,
    };
    Ok(sequence_loss(params, features, wordpieces, &[], &opts)?.total)
}

/// The speaker-label lattice (blank from the ASR joint, labels from the
/// auxiliary joint) without touching gradients.
pub fn aux_lattice(
    params: &ModelParams,
    features: &Tensor2,
    wordpieces: &[usize],
    speakers: &[usize],
) -> Result<LogProbLattice> {
    check_targets(params, wordpieces, Some(speakers))?;
    let cache = FrozenAsrCache::build(params, features, wordpieces)?;
    Ok(aux_forward(params, &cache.tap, &cache.predictor, &cache.blank_logits, speakers)?.lattice)
}

pub fn asr_lattice(params: &ModelParams, features: &Tensor2, wordpieces: &[usize]) -> Result<LogProbLattice> {
    check_targets(params, wordpieces, None)?;
    asr_forward(params, features, wordpieces, true)?
        .lattice
        .ok_or_else(|| Error::Invalid("lattice not built".into()))
}

#[cfg(test)]
fn point_distribution(params: &ModelParams, f: &[f64], g: &[f64]) -> (f64, Vec<f64>) {
    let h = params.asr_joint.hidden(f, g).unwrap();
    let s = params.asr_joint.output(&h).unwrap();
    let b = sigmoid(s[0]);
    let rest = crate::numerics::softmax(&s[1..]).into_iter().map(|p| (1.0 - b) * p).collect();
    (b, rest)
}
