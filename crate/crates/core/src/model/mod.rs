//! The joint ASR + speaker network.
//!
//! ```text
//! features ─▶ ASR encoder ──────────────▶ f_t ─┐
//!                 │ (tap layer)                 ├─▶ ASR joint ─▶ s = [blank, wordpieces]
//!                 ▼                             │                 │
//!            aux encoder ─▶ f_aux_t ─┐   g_u ───┤                 │ s[0]
//!                                    ├──────────┴─▶ aux joint ─▶ s_aux = [s[0], speakers]
//! history ─▶ predictor ─▶ g_u ───────┘
//! ```
//!
//! Rows are time steps; every per-step vector is a row vector, so a projection
//! `P·f` is stored as a `d_in × d_out` matrix applied on the right.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine, affine_backward, log_sigmoid, lstm_sequence, lstm_sequence_backward, sigmoid, softmax,
    vec_mat_acc, Activation, LstmParams, LstmTrace, ParamGrad, Tensor2,
};

/// Token id 0 is the blank; it also pads predictor histories as start-of-sequence.
pub const BLANK: usize = 0;
pub const SOS: usize = BLANK;

/// Weight initialization range; biases start at zero.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_features: usize,
    /// ASR encoder width; also the width of the tapped activations.
    pub d_a: usize,
    pub d_l: usize,
    pub d_h: usize,
    pub d_aux: usize,
    pub d_h_aux: usize,
    /// Wordpiece vocabulary size including the blank.
    pub vocab_size: usize,
    /// Speaker label count N; the auxiliary output space has N + 1 entries.
    pub max_speakers: usize,
    pub asr_layers: usize,
    /// 1-based index of the ASR encoder block feeding the auxiliary encoder.
    pub tap_layer: usize,
    pub aux_layers: usize,
    pub predictor_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_features: 16,
            d_a: 32,
            d_l: 24,
            d_h: 32,
            d_aux: 32,
            d_h_aux: 32,
            vocab_size: 64,
            max_speakers: 4,
            asr_layers: 3,
            tap_layer: 2,
            aux_layers: 1,
            predictor_context: 2,
        }
    }
}

impl ModelConfig {
    /// Production-scale shapes (512-dim acoustic features, 4096 wordpieces,
    /// 12 encoder layers tapped at the 5th, 9-layer auxiliary encoder, 8 speakers).
    pub fn production() -> Self {
        Self {
            d_features: 512,
            d_a: 512,
            d_l: 640,
            d_h: 640,
            d_aux: 512,
            d_h_aux: 640,
            vocab_size: 4096,
            max_speakers: 8,
            asr_layers: 12,
            tap_layer: 5,
            aux_layers: 9,
            predictor_context: 2,
        }
    }

    pub fn aux_vocab_size(&self) -> usize {
        self.max_speakers + 1
    }

    pub fn d_tap(&self) -> usize {
        self.d_a
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_features", self.d_features),
            ("d_a", self.d_a),
            ("d_l", self.d_l),
            ("d_h", self.d_h),
            ("d_aux", self.d_aux),
            ("d_h_aux", self.d_h_aux),
            ("asr_layers", self.asr_layers),
            ("aux_layers", self.aux_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Invalid(format!("model.{name} must be positive")));
            }
        }
        if self.tap_layer < 1 || self.tap_layer > self.asr_layers {
            return Err(Error::Invalid(format!(
                "model.tap_layer must be in 1..={}, got {}",
                self.asr_layers, self.tap_layer
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Invalid("model.vocab_size must be at least 2".into()));
        }
        if self.max_speakers < 1 {
            return Err(Error::Invalid("model.max_speakers must be at least 1".into()));
        }
        if self.predictor_context < 1 {
            return Err(Error::Invalid("model.predictor_context must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AsrEncoder,
    Predictor,
    AsrJoint,
    AuxEncoder,
    AuxJoint,
}

impl ParamGroup {
    pub const ASR: [ParamGroup; 3] = [ParamGroup::AsrEncoder, ParamGroup::Predictor, ParamGroup::AsrJoint];
    pub const AUX: [ParamGroup; 2] = [ParamGroup::AuxEncoder, ParamGroup::AuxJoint];

    pub fn is_asr(self) -> bool {
        Self::ASR.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Asr,
    Aux,
}

/// One ASR encoder block: `tanh(x·W + b)` followed by a causal LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub proj_w: ParamGrad,
    pub proj_b: ParamGrad,
    pub lstm: LstmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// vocab × d_l
    pub embedding: ParamGrad,
    /// (context·d_l) × d_l
    pub proj_w: ParamGrad,
    pub proj_b: ParamGrad,
}

/// `h = f·P + g·Q + b_h`, `s = tanh(h)·A + b_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub p: ParamGrad,
    pub q: ParamGrad,
    pub b_h: ParamGrad,
    pub a: ParamGrad,
    pub b_s: ParamGrad,
}

impl JointParams {
    fn init<R: Rng + ?Sized>(d_f: usize, d_g: usize, d_h: usize, out: usize, rng: &mut R) -> Self {
        let u = |r, c, rng: &mut R| ParamGrad::new(Tensor2::uniform(r, c, -INIT_SCALE, INIT_SCALE, rng));
        Self {
            p: u(d_f, d_h, rng),
            q: u(d_g, d_h, rng),
            b_h: ParamGrad::zeros(1, d_h),
            a: u(d_h, out, rng),
            b_s: ParamGrad::zeros(1, out),
        }
    }

    fn params(&self) -> [(&'static str, &ParamGrad); 5] {
        [("p", &self.p), ("q", &self.q), ("b_h", &self.b_h), ("a", &self.a), ("b_s", &self.b_s)]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut ParamGrad); 5] {
        [
            ("p", &mut self.p),
            ("q", &mut self.q),
            ("b_h", &mut self.b_h),
            ("a", &mut self.a),
            ("b_s", &mut self.b_s),
        ]
    }

    /// Pre-activation hidden vector.
    pub fn hidden(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.p.value.rows() {
            return Err(Error::dim("joint f", (1, f.len()), self.p.shape()));
        }
        if g.len() != self.q.value.rows() {
            return Err(Error::dim("joint g", (1, g.len()), self.q.shape()));
        }
        let mut h = self.b_h.value.data().to_vec();
        vec_mat_acc(f, &self.p.value, &mut h);
        vec_mat_acc(g, &self.q.value, &mut h);
        Ok(h)
    }

    /// `tanh(h)·A + b_s`.
    pub fn output(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.a.value.rows() {
            return Err(Error::dim("joint output", (1, h.len()), self.a.shape()));
        }
        let th: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
        let mut s = self.b_s.value.data().to_vec();
        vec_mat_acc(&th, &self.a.value, &mut s);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub asr_encoder: Vec<EncoderBlock>,
    pub predictor: Predictor,
    pub asr_joint: JointParams,
    pub aux_encoder: Vec<LstmParams>,
    pub aux_joint: JointParams,
}

/// Forward trace of the ASR encoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor2,
    activated: Tensor2,
    lstm: LstmTrace,
}

/// Forward trace of the auxiliary encoder.
#[derive(Debug, Clone)]
pub struct AuxTrace {
    layers: Vec<LstmTrace>,
}

/// Predictor outputs `g_0..g_U` for a teacher-forced target sequence.
#[derive(Debug, Clone)]
pub struct PredictorTrace {
    contexts: Vec<Vec<usize>>,
    inputs: Tensor2,
}

impl ModelParams {
    /// Seeded uniform initialization in `[-INIT_SCALE, INIT_SCALE]`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let u = |r, c, rng: &mut R| ParamGrad::new(Tensor2::uniform(r, c, -INIT_SCALE, INIT_SCALE, rng));
        let mut asr_encoder = Vec::with_capacity(c.asr_layers);
        for l in 0..c.asr_layers {
            let d_in = if l == 0 { c.d_features } else { c.d_a };
            asr_encoder.push(EncoderBlock {
                proj_w: u(d_in, c.d_a, rng),
                proj_b: ParamGrad::zeros(1, c.d_a),
                lstm: LstmParams::uniform(c.d_a, c.d_a, INIT_SCALE, rng),
            });
        }
        let predictor = Predictor {
            embedding: u(c.vocab_size, c.d_l, rng),
            proj_w: u(c.predictor_context * c.d_l, c.d_l, rng),
            proj_b: ParamGrad::zeros(1, c.d_l),
        };
        let asr_joint = JointParams::init(c.d_a, c.d_l, c.d_h, c.vocab_size, rng);
        let aux_encoder = Self::init_aux_encoder(c, rng);
        let aux_joint = JointParams::init(c.d_aux, c.d_l, c.d_h_aux, c.max_speakers, rng);
        Ok(Self {
            config: c.clone(),
            asr_encoder,
            predictor,
            asr_joint,
            aux_encoder,
            aux_joint,
        })
    }

    fn init_aux_encoder<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> Vec<LstmParams> {
        (0..c.aux_layers)
            .map(|l| {
                let d_in = if l == 0 { c.d_tap() } else { c.d_aux };
                LstmParams::uniform(d_in, c.d_aux, INIT_SCALE, rng)
            })
            .collect()
    }

    /// Fresh auxiliary network (encoder and joint) with the given tap layer,
    /// keeping every ASR tensor.
    pub fn reinit_aux<R: Rng + ?Sized>(&mut self, tap_layer: usize, rng: &mut R) -> Result<()> {
        let mut c = self.config.clone();
        c.tap_layer = tap_layer;
        c.validate()?;
        self.aux_encoder = Self::init_aux_encoder(&c, rng);
        self.aux_joint = JointParams::init(c.d_aux, c.d_l, c.d_h_aux, c.max_speakers, rng);
        self.config = c;
        Ok(())
    }

    /// Every tensor with a stable dotted name and its group.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, &ParamGrad)> {
        let mut out = Vec::new();
        for (l, b) in self.asr_encoder.iter().enumerate() {
            out.push((format!("asr_encoder.{l}.proj.w"), ParamGroup::AsrEncoder, &b.proj_w));
            out.push((format!("asr_encoder.{l}.proj.b"), ParamGroup::AsrEncoder, &b.proj_b));
            for (n, p) in b.lstm.params() {
                out.push((format!("asr_encoder.{l}.lstm.{n}"), ParamGroup::AsrEncoder, p));
            }
        }
        out.push(("predictor.embedding".into(), ParamGroup::Predictor, &self.predictor.embedding));
        out.push(("predictor.proj.w".into(), ParamGroup::Predictor, &self.predictor.proj_w));
        out.push(("predictor.proj.b".into(), ParamGroup::Predictor, &self.predictor.proj_b));
        for (n, p) in self.asr_joint.params() {
            out.push((format!("asr_joint.{n}"), ParamGroup::AsrJoint, p));
        }
        for (l, lstm) in self.aux_encoder.iter().enumerate() {
            for (n, p) in lstm.params() {
                out.push((format!("aux_encoder.{l}.{n}"), ParamGroup::AuxEncoder, p));
            }
        }
        for (n, p) in self.aux_joint.params() {
            out.push((format!("aux_joint.{n}"), ParamGroup::AuxJoint, p));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamGroup, &mut ParamGrad)> {
        let mut out = Vec::new();
        for (l, b) in self.asr_encoder.iter_mut().enumerate() {
            out.push((format!("asr_encoder.{l}.proj.w"), ParamGroup::AsrEncoder, &mut b.proj_w));
            out.push((format!("asr_encoder.{l}.proj.b"), ParamGroup::AsrEncoder, &mut b.proj_b));
            for (n, p) in b.lstm.params_mut() {
                out.push((format!("asr_encoder.{l}.lstm.{n}"), ParamGroup::AsrEncoder, p));
            }
        }
        let pr = &mut self.predictor;
        out.push(("predictor.embedding".into(), ParamGroup::Predictor, &mut pr.embedding));
        out.push(("predictor.proj.w".into(), ParamGroup::Predictor, &mut pr.proj_w));
        out.push(("predictor.proj.b".into(), ParamGroup::Predictor, &mut pr.proj_b));
        for (n, p) in self.asr_joint.params_mut() {
            out.push((format!("asr_joint.{n}"), ParamGroup::AsrJoint, p));
        }
        for (l, lstm) in self.aux_encoder.iter_mut().enumerate() {
            for (n, p) in lstm.params_mut() {
                out.push((format!("aux_encoder.{l}.{n}"), ParamGroup::AuxEncoder, p));
            }
        }
        for (n, p) in self.aux_joint.params_mut() {
            out.push((format!("aux_joint.{n}"), ParamGroup::AuxJoint, p));
        }
        out
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for (_, g, p) in self.named_params_mut() {
            if g == group {
                p.frozen = frozen;
            }
        }
    }

    /// Freezes (or unfreezes) the ASR encoder, predictor and ASR joint together.
    pub fn freeze_asr(&mut self, frozen: bool) {
        for g in ParamGroup::ASR {
            self.set_frozen(g, frozen);
        }
    }

    pub fn is_group_frozen(&self, group: ParamGroup) -> bool {
        self.named_params()
            .into_iter()
            .filter(|(_, g, _)| *g == group)
            .all(|(_, _, p)| p.frozen)
    }

    pub fn asr_frozen(&self) -> bool {
        ParamGroup::ASR.iter().all(|&g| self.is_group_frozen(g))
    }

    pub fn zero_grads(&mut self) {
        for (_, _, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Adds `other`'s gradients into `self` tensor by tensor, in a fixed order.
    pub fn add_grads_from(&mut self, other: &ModelParams) -> Result<()> {
        let src = other.named_params();
        let dst = self.named_params_mut();
        if src.len() != dst.len() {
            return Err(Error::Invalid("gradient structure mismatch".into()));
        }
        for ((_, _, d), (_, _, s)) in dst.into_iter().zip(src) {
            d.grad.add_assign(&s.grad)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for (_, _, p) in self.named_params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Concatenated values of all tensors whose group passes `filter`.
    pub fn flat_values(&self, filter: impl Fn(ParamGroup) -> bool) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .filter(|(_, g, _)| filter(*g))
            .flat_map(|(_, _, p)| p.value.data().to_vec())
            .collect()
    }

    pub fn flat_grads(&self, filter: impl Fn(ParamGroup) -> bool) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .filter(|(_, g, _)| filter(*g))
            .flat_map(|(_, _, p)| p.grad.data().to_vec())
            .collect()
    }

    /// Inverse of [`Self::flat_values`] for the same filter.
    pub fn set_flat_values(&mut self, filter: impl Fn(ParamGroup) -> bool, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for (_, g, p) in self.named_params_mut() {
            if !filter(g) {
                continue;
            }
            let n = p.len();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Invalid("flat parameter vector too short".into()))?;
            p.value.data_mut().copy_from_slice(chunk);
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::Invalid("flat parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, _, p)| p.len()).sum()
    }

    // ---- ASR encoder ----

    /// Final encoder outputs `f_seq` and the tapped activations, both `T` rows.
    pub fn asr_encode(&self, features: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let (f, tap, _) = self.asr_encode_traced(features)?;
        Ok((f, tap))
    }

    pub fn asr_encode_traced(&self, features: &Tensor2) -> Result<(Tensor2, Tensor2, EncoderTrace)> {
        if features.rows() == 0 {
            return Err(Error::Domain("cannot encode an empty feature sequence".into()));
        }
        if features.cols() != self.config.d_features {
            return Err(Error::dim(
                "asr_encode",
                features.shape(),
                (features.rows(), self.config.d_features),
            ));
        }
        features.check_finite("features")?;
        let mut x = features.clone();
        let mut blocks = Vec::with_capacity(self.asr_encoder.len());
        let mut tap = None;
        for (l, block) in self.asr_encoder.iter().enumerate() {
            let activated = crate::numerics::activation(Activation::Tanh, &affine(&x, &block.proj_w, &block.proj_b)?)?;
            let (out, lstm) = lstm_sequence(&block.lstm, &activated)?;
            blocks.push(BlockTrace {
                input: x,
                activated,
                lstm,
            });
            if l + 1 == self.config.tap_layer {
                tap = Some(out.clone());
            }
            x = out;
        }
        let tap = tap.ok_or_else(|| Error::Invalid("tap layer beyond encoder depth".into()))?;
        Ok((x, tap, EncoderTrace { blocks }))
    }

    /// Backpropagates `d_f` (final outputs) and optionally `d_tap` into the encoder.
    pub fn asr_encode_backward(
        &mut self,
        trace: &EncoderTrace,
        d_f: &Tensor2,
        d_tap: Option<&Tensor2>,
    ) -> Result<()> {
        if self.is_group_frozen(ParamGroup::AsrEncoder) {
            return Ok(());
        }
        let tap_layer = self.config.tap_layer;
        let mut d_out = d_f.clone();
        for l in (0..self.asr_encoder.len()).rev() {
            if l + 1 == tap_layer {
                if let Some(dt) = d_tap {
                    d_out.add_assign(dt)?;
                }
            }
            let bt = &trace.blocks[l];
            let block = &mut self.asr_encoder[l];
            let d_act = lstm_sequence_backward(&mut block.lstm, &bt.lstm, &d_out)?;
            let d_pre = crate::numerics::activation_backward(Activation::Tanh, &bt.activated, &d_act)?;
            d_out = affine_backward(&bt.input, &d_pre, &mut block.proj_w, &mut block.proj_b)?;
        }
        Ok(())
    }

    // ---- auxiliary encoder ----

    /// Causal, length-preserving encoding of the tapped activations.
    pub fn aux_encode(&self, tap_seq: &Tensor2) -> Result<Tensor2> {
        Ok(self.aux_encode_traced(tap_seq)?.0)
    }

    pub fn aux_encode_traced(&self, tap_seq: &Tensor2) -> Result<(Tensor2, AuxTrace)> {
        if tap_seq.rows() == 0 {
            return Err(Error::Domain("cannot encode an empty tap sequence".into()));
        }
        if tap_seq.cols() != self.config.d_tap() {
            return Err(Error::dim("aux_encode", tap_seq.shape(), (tap_seq.rows(), self.config.d_tap())));
        }
        let mut x = tap_seq.clone();
        let mut layers = Vec::with_capacity(self.aux_encoder.len());
        for lstm in &self.aux_encoder {
            let (out, tr) = lstm_sequence(lstm, &x)?;
            layers.push(tr);
            x = out;
        }
        Ok((x, AuxTrace { layers }))
    }

    /// Returns the gradient w.r.t. the tapped activations.
    pub fn aux_encode_backward(&mut self, trace: &AuxTrace, d_out: &Tensor2) -> Result<Tensor2> {
        let mut d = d_out.clone();
        for (lstm, tr) in self.aux_encoder.iter_mut().zip(&trace.layers).rev() {
            d = lstm_sequence_backward(lstm, tr, &d)?;
        }
        Ok(d)
    }

    // ---- predictor ----

    fn context_of(&self, history: &[usize]) -> Result<Vec<usize>> {
        let v = self.config.vocab_size;
        if let Some(&bad) = history.iter().find(|&&t| t >= v) {
            return Err(Error::Range {
                what: "token id",
                value: bad,
                limit: v,
            });
        }
        let ctx = self.config.predictor_context;
        let mut out = vec![SOS; ctx.saturating_sub(history.len())];
        out.extend_from_slice(&history[history.len().saturating_sub(ctx)..]);
        Ok(out)
    }

    fn predictor_input(&self, context: &[usize]) -> Vec<f64> {
        let mut x = Vec::with_capacity(context.len() * self.config.d_l);
        for &t in context {
            x.extend_from_slice(self.predictor.embedding.value.row(t));
        }
        x
    }

    /// Prediction-network output for the last `predictor_context` non-blank tokens.
    pub fn predict(&self, history: &[usize]) -> Result<Vec<f64>> {
        let ctx = self.context_of(history)?;
        let x = Tensor2::row_vector(self.predictor_input(&ctx));
        Ok(affine(&x, &self.predictor.proj_w, &self.predictor.proj_b)?.into_data())
    }

    /// `g_u` for `u = 0..=U` under teacher forcing on `targets`.
    pub fn predictor_outputs(&self, targets: &[usize]) -> Result<(Tensor2, PredictorTrace)> {
        let mut contexts = Vec::with_capacity(targets.len() + 1);
        for u in 0..=targets.len() {
            contexts.push(self.context_of(&targets[..u])?);
        }
        let rows: Vec<Vec<f64>> = contexts.iter().map(|c| self.predictor_input(c)).collect();
        let inputs = Tensor2::from_rows(&rows)?;
        let g = affine(&inputs, &self.predictor.proj_w, &self.predictor.proj_b)?;
        Ok((g, PredictorTrace { contexts, inputs }))
    }

    pub fn predictor_backward(&mut self, trace: &PredictorTrace, d_g: &Tensor2) -> Result<()> {
        if self.is_group_frozen(ParamGroup::Predictor) {
            return Ok(());
        }
        let pr = &mut self.predictor;
        let d_x = affine_backward(&trace.inputs, d_g, &mut pr.proj_w, &mut pr.proj_b)?;
        let d_l = self.config.d_l;
        if let Some(ge) = pr.embedding.grad_mut() {
            for (u, ctx) in trace.contexts.iter().enumerate() {
                for (k, &tok) in ctx.iter().enumerate() {
                    crate::numerics::add_into(ge.row_mut(tok), &d_x.row(u)[k * d_l..(k + 1) * d_l]);
                }
            }
        }
        Ok(())
    }

    // ---- joints ----

    pub fn joint(&self, which: JointKind) -> &JointParams {
        match which {
            JointKind::Asr => &self.asr_joint,
            JointKind::Aux => &self.aux_joint,
        }
    }

    /// Pre-activation joint hidden vector; `f` is `f_t` for the ASR joint and
    /// `f_aux_t` for the auxiliary joint.
    pub fn joint_hidden(&self, f: &[f64], g: &[f64], which: JointKind) -> Result<Vec<f64>> {
        self.joint(which).hidden(f, g)
    }

    /// Raw ASR logits; index 0 is the blank.
    pub fn asr_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.asr_joint.output(h)
    }

    /// Auxiliary logits with the ASR blank logit (computed at the same lattice
    /// point) copied into position 0.
    pub fn aux_logits(&self, h_aux: &[f64], s_blank: f64) -> Result<Vec<f64>> {
        let spk = self.aux_joint.output(h_aux)?;
        let mut s = Vec::with_capacity(spk.len() + 1);
        s.push(s_blank);
        s.extend(spk);
        Ok(s)
    }
}

/// HAT factorization: blank probability `σ(s[0])` and the non-blank
/// distribution `(1 - b)·softmax(s[1..])`.
pub fn hat_posterior(s: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s.len() < 2 {
        return Err(Error::Domain("HAT posterior needs at least one non-blank logit".into()));
    }
    let b = sigmoid(s[0]);
    let keep = sigmoid(-s[0]);
    let p = softmax(&s[1..]).into_iter().map(|v| keep * v).collect();
    Ok((b, p))
}

/// Log-space HAT terms: `(ln b, ln(1 - b), log_softmax(s[1..]))`.
pub fn hat_log_posterior(s: &[f64]) -> (f64, f64, Vec<f64>) {
    (log_sigmoid(s[0]), log_sigmoid(-s[0]), crate::numerics::log_softmax(&s[1..]))
}

/// Speaker distribution given a non-blank emission: softmax over `s_aux[1..]`.
pub fn aux_posterior(s_aux: &[f64]) -> Vec<f64> {
    softmax(&s_aux[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_features: 5,
            d_a: 6,
            d_l: 4,
            d_h: 5,
            d_aux: 4,
            d_h_aux: 3,
            vocab_size: 7,
            max_speakers: 3,
            asr_layers: 3,
            tap_layer: 2,
            aux_layers: 2,
            predictor_context: 2,
        }
    }

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(&small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        ModelConfig::production().validate().unwrap();
        c.tap_layer = 0;
        assert!(c.validate().is_err());
        c.tap_layer = c.asr_layers + 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.max_speakers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn aux_output_has_n_columns_and_shares_blank() {
        let m = model(1);
        assert_eq!(m.aux_joint.a.value.cols(), 3);
        assert_eq!(m.asr_joint.a.value.cols(), 7);
        let h = m.joint_hidden(&[0.1; 4], &[0.2; 4], JointKind::Aux).unwrap();
        let s_aux = m.aux_logits(&h, -1.2345).unwrap();
        assert_eq!(s_aux.len(), m.config.aux_vocab_size());
        assert_eq!(s_aux[0].to_bits(), (-1.2345f64).to_bits());
    }

    #[test]
    fn tap_at_top_equals_final_output() {
        let mut m = model(2);
        m.config.tap_layer = m.config.asr_layers;
        let x = Tensor2::uniform(4, 5, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (f, tap) = m.asr_encode(&x).unwrap();
        assert_eq!(f, tap);
    }

    #[test]
    fn single_frame_shapes_and_empty_input() {
        let m = model(3);
        let (f, tap) = m.asr_encode(&Tensor2::zeros(1, 5)).unwrap();
        assert_eq!(f.shape(), (1, 6));
        assert_eq!(tap.shape(), (1, 6));
        assert!(matches!(m.asr_encode(&Tensor2::zeros(0, 5)), Err(Error::Domain(_))));
    }

    #[test]
    fn tap_ignores_layers_above_it() {
        let m = model(4);
        let x = Tensor2::uniform(6, 5, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, tap_a) = m.asr_encode(&x).unwrap();
        let mut m2 = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        m2.asr_encoder[2].proj_w.value = Tensor2::uniform(6, 6, -1.0, 1.0, &mut rng);
        m2.asr_encoder[2].lstm = LstmParams::uniform(6, 6, 1.0, &mut rng);
        let (f_b, tap_b) = m2.asr_encode(&x).unwrap();
        assert_eq!(tap_a, tap_b);
        assert_ne!(m.asr_encode(&x).unwrap().0, f_b);
    }

    #[test]
    fn aux_encoder_zero_weights_length_and_causality() {
        let mut m = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [1, 7, 50] {
            let tap = Tensor2::uniform(len, 6, -1.0, 1.0, &mut rng);
            assert_eq!(m.aux_encode(&tap).unwrap().rows(), len);
        }
        let full_in = Tensor2::uniform(10, 6, -1.0, 1.0, &mut rng);
        let full = m.aux_encode(&full_in).unwrap();
        for k in 0..10 {
            let prefix = m.aux_encode(&full_in.slice_rows(0, k + 1)).unwrap();
            assert_eq!(prefix, full.slice_rows(0, k + 1));
        }
        for l in &mut m.aux_encoder {
            for (_, p) in l.params_mut() {
                p.value.fill(0.0);
            }
        }
        assert!(m.aux_encode(&full_in).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.aux_encode(&Tensor2::zeros(3, 5)).is_err());
    }

    #[test]
    fn predictor_context_window() {
        let m = model(6);
        let g_empty = m.predict(&[]).unwrap();
        assert_eq!(g_empty, m.predict(&[SOS, SOS]).unwrap());
        assert_eq!(g_empty.len(), 4);
        assert_eq!(m.predict(&[3, 4]).unwrap(), m.predict(&[3, 4]).unwrap());
        // only the last two tokens matter
        assert_eq!(m.predict(&[1, 3, 4]).unwrap(), m.predict(&[5, 3, 4]).unwrap());
        assert_ne!(m.predict(&[3, 4]).unwrap(), m.predict(&[4, 3]).unwrap());
        assert!(matches!(m.predict(&[7]), Err(Error::Range { .. })));
    }

    #[test]
    fn predictor_outputs_match_predict() {
        let m = model(7);
        let targets = [2, 5, 1, 6];
        let (g, _) = m.predictor_outputs(&targets).unwrap();
        for u in 0..=targets.len() {
            assert_eq!(g.row(u), &m.predict(&targets[..u]).unwrap()[..]);
        }
    }

    #[test]
    fn joint_hidden_is_affine() {
        let m = model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = Tensor2::uniform(1, 6, -1.0, 1.0, &mut rng).into_data();
        let f2 = Tensor2::uniform(1, 6, -1.0, 1.0, &mut rng).into_data();
        let g = Tensor2::uniform(1, 4, -1.0, 1.0, &mut rng).into_data();
        let sum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let h = |f: &[f64]| m.joint_hidden(f, &g, JointKind::Asr).unwrap();
        let lhs: Vec<f64> = h(&sum).iter().zip(h(&f2)).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = h(&f1).iter().zip(h(&[0.0; 6])).map(|(a, b)| a - b).collect();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-14);
        }
        let h0 = m.joint_hidden(&[0.0; 6], &[0.0; 4], JointKind::Asr).unwrap();
        assert_eq!(h0, m.asr_joint.b_h.value.data());
    }

    #[test]
    fn asr_logits_shape_zero_and_saturation() {
        let m = model(9);
        let s = m.asr_logits(&[0.0; 5]).unwrap();
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|&v| v == 0.0));
        for big in [1e3, -1e3] {
            assert!(m.asr_logits(&[big; 5]).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn hat_posterior_cases() {
        let (b, p) = hat_posterior(&[0.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(b, 0.5);
        for v in &p {
            assert!((v - 0.5 / 4.0).abs() < 1e-15);
        }
        let (b, p) = hat_posterior(&[50.0, 1.0, -3.0]).unwrap();
        assert!(1.0 - b < 1e-20);
        assert!(p.iter().all(|&v| v < 1e-20));
        assert!(hat_posterior(&[1.0]).is_err());
    }

    #[test]
    fn aux_posterior_uniform_and_shift_invariant() {
        let p = aux_posterior(&[3.0, 0.7, 0.7, 0.7, 0.7]);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = [0.1, 0.3, -1.0, 2.0];
        let shifted: Vec<f64> = std::iter::once(0.1).chain(s[1..].iter().map(|v| v + 17.0)).collect();
        assert_eq!(
            crate::numerics::argmax(&aux_posterior(&s)),
            crate::numerics::argmax(&aux_posterior(&shifted))
        );
    }

    #[test]
    fn flat_values_roundtrip_and_freeze_groups() {
        let mut m = model(10);
        let all = m.flat_values(|_| true);
        assert_eq!(all.len(), m.num_params());
        let aux = m.flat_values(|g| !g.is_asr());
        let doubled: Vec<f64> = aux.iter().map(|v| 2.0 * v).collect();
        m.set_flat_values(|g| !g.is_asr(), &doubled).unwrap();
        assert_eq!(m.flat_values(|g| !g.is_asr()), doubled);
        assert!(!m.asr_frozen());
        m.freeze_asr(true);
        assert!(m.asr_frozen());
        assert!(!m.is_group_frozen(ParamGroup::AuxJoint));
    }
}
