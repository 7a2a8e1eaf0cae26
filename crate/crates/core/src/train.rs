//! Mini-batch training with per-example gradients reduced in a fixed order, so
//! serial and parallel runs produce bit-identical parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_targets, Conversation, Tokenizer, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};
use crate::numerics::Tensor2;
use crate::transducer::{aux_loss_cached, sequence_loss, FrozenAsrCache, LossOptions, LossWeights};

/// One training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor2,
    pub wordpieces: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl Example {
    pub fn from_conversation(conv: &Conversation, vocab: &Vocab, tokenizer: Tokenizer, max_speakers: usize) -> Result<Self> {
        let ids = conv.speaker_ids(max_speakers)?;
        let (wordpieces, speakers) = build_targets(&conv.words, &ids, vocab, tokenizer)?;
        Ok(Self {
            id: conv.id.clone(),
            features: conv.features.clone(),
            wordpieces,
            speakers,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`; the
    /// rate falls linearly in between. 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    /// Only used by [`Phase::Joint`].
    pub loss_weights: LossWeights,
    pub aux_blank_gradient: bool,
    /// Per-example gradients on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            loss_weights: LossWeights::AUX_ONLY,
            aux_blank_gradient: false,
            parallel: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate applied at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.learning_rate * (1.0 - frac * (1.0 - self.final_lr_fraction))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid("train.learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Invalid("train.final_lr_fraction must be in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Invalid("train.grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// What a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Wordpiece loss on the ASR side; the auxiliary network is untouched.
    Asr,
    /// Speaker-label loss with the ASR side frozen.
    Aux,
    /// Weighted sum of both losses over whatever is unfrozen.
    Joint,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        let tensors = params.named_params_mut();
        if self.m.is_empty() {
            self.m = tensors.iter().map(|(_, _, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, _, p)) in tensors.into_iter().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn set_lr(&mut self, rate: f64) {
        match self {
            Optimizer::Adam(a) => a.lr = rate,
            Optimizer::Sgd { lr } => *lr = rate,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        match self {
            Optimizer::Adam(a) => a.step(params),
            Optimizer::Sgd { lr } => {
                for (_, _, p) in params.named_params_mut() {
                    if p.frozen {
                        continue;
                    }
                    let grad = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                        *w -= *lr * g;
                    }
                }
            }
        }
    }
}

/// Rescales gradients to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = params
        .named_params()
        .iter()
        .filter(|(_, _, p)| !p.frozen)
        .flat_map(|(_, _, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean per-example loss of each step's batch.
    pub losses: Vec<f64>,
}

impl TrainStats {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

enum Job<'a> {
    Cached(&'a [FrozenAsrCache]),
    Full(LossOptions),
}

fn example_grads(params: &ModelParams, data: &[Example], i: usize, job: &Job) -> Result<(f64, ModelParams)> {
    let mut p = params.clone();
    p.zero_grads();
    let ex = &data[i];
    let loss = match job {
        Job::Cached(caches) => aux_loss_cached(&mut p, &caches[i], &ex.speakers)?,
        Job::Full(opts) => sequence_loss(&mut p, &ex.features, &ex.wordpieces, &ex.speakers, opts)?.total,
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on example {}", ex.id)));
    }
    Ok((loss, p))
}

/// Runs `cfg.steps` optimizer steps over shuffled mini-batches. `on_step`
/// receives the step index and mean batch loss.
pub fn train(
    params: &mut ModelParams,
    data: &[Example],
    cfg: &TrainConfig,
    phase: Phase,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let restore_aux = match phase {
        Phase::Asr => {
            let was = ParamGroup::AUX.map(|g| params.is_group_frozen(g));
            params.freeze_asr(false);
            for g in ParamGroup::AUX {
                params.set_frozen(g, true);
            }
            Some(was)
        }
        Phase::Aux => {
            params.freeze_asr(true);
            for g in ParamGroup::AUX {
                params.set_frozen(g, false);
            }
            None
        }
        Phase::Joint => None,
    };

    let caches;
    let job = match phase {
        Phase::Asr => Job::Full(LossOptions {
            weights: LossWeights::ASR_ONLY,
            aux_blank_gradient: false,
        }),
        Phase::Aux => {
            let build = |ex: &Example| FrozenAsrCache::build(params, &ex.features, &ex.wordpieces);
            caches = if cfg.parallel {
                data.par_iter().map(build).collect::<Result<Vec<_>>>()?
            } else {
                data.iter().map(build).collect::<Result<Vec<_>>>()?
            };
            Job::Cached(&caches)
        }
        Phase::Joint => Job::Full(LossOptions {
            weights: cfg.loss_weights,
            aux_blank_gradient: cfg.aux_blank_gradient,
        }),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut stats = TrainStats::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let snapshot: &ModelParams = params;
        let results: Vec<Result<(f64, ModelParams)>> = if cfg.parallel {
            batch.par_iter().map(|&i| example_grads(snapshot, data, i, &job)).collect()
        } else {
            batch.iter().map(|&i| example_grads(snapshot, data, i, &job)).collect()
        };
        params.zero_grads();
        let mut total = 0.0;
        for r in results {
            let (loss, g) = r?;
            total += loss;
            params.add_grads_from(&g)?;
        }
        let n = batch.len() as f64;
        params.scale_grads(1.0 / n);
        clip_grad_norm(params, cfg.grad_clip);
        opt.set_lr(cfg.lr_at(step));
        opt.step(params);
        let mean = total / n;
        stats.losses.push(mean);
        on_step(step, mean);
    }
    params.zero_grads();
    if let Some(was) = restore_aux {
        for (g, f) in ParamGroup::AUX.into_iter().zip(was) {
            params.set_frozen(g, f);
        }
    }
    Ok(stats)
}

/// Mean per-example loss without touching the parameters' gradients.
pub fn mean_loss(params: &ModelParams, data: &[Example], phase: Phase, cfg: &TrainConfig) -> Result<f64> {
    let opts = match phase {
        Phase::Asr => LossOptions {
            weights: LossWeights::ASR_ONLY,
            aux_blank_gradient: false,
        },
        Phase::Aux => LossOptions::default(),
        Phase::Joint => LossOptions {
            weights: cfg.loss_weights,
            aux_blank_gradient: cfg.aux_blank_gradient,
        },
    };
    let mut total = 0.0;
    for ex in data {
        let mut p = params.clone();
        p.freeze_asr(true);
        for g in ParamGroup::AUX {
            p.set_frozen(g, true);
        }
        total += sequence_loss(&mut p, &ex.features, &ex.wordpieces, &ex.speakers, &opts)?.total;
    }
    Ok(total / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    #[test]
    fn linear_decay_hits_both_ends() {
        let cfg = TrainConfig {
            steps: 5,
            learning_rate: 0.4,
            final_lr_fraction: 0.25,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..5).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs[0], 0.4);
        assert!((lrs[4] - 0.1).abs() < 1e-15);
        assert!((lrs[2] - 0.25).abs() < 1e-15);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(TrainConfig::default().lr_at(999), 1e-3);
        assert!(TrainConfig { final_lr_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    fn tiny(seed: u64, n: usize) -> (ModelParams, Vec<Example>) {
        let cfg = ModelConfig {
            d_features: 4,
            d_a: 6,
            d_l: 5,
            d_h: 6,
            d_aux: 5,
            d_h_aux: 6,
            vocab_size: 5,
            max_speakers: 2,
            asr_layers: 2,
            tap_layer: 1,
            aux_layers: 1,
            predictor_context: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let data = (0..n)
            .map(|i| {
                let u = rng.random_range(1..4);
                Example {
                    id: format!("e{i}"),
                    features: Tensor2::uniform(6, 4, -1.0, 1.0, &mut rng),
                    wordpieces: (0..u).map(|_| rng.random_range(1..5)).collect(),
                    speakers: (0..u).map(|_| rng.random_range(1..3)).collect(),
                }
            })
            .collect();
        (params, data)
    }

    #[test]
    fn serial_and_parallel_runs_are_bit_identical() {
        let (p0, data) = tiny(1, 10);
        for phase in [Phase::Asr, Phase::Aux, Phase::Joint] {
            let mut cfg = TrainConfig {
                steps: 5,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let mut a = p0.clone();
            let sa = train(&mut a, &data, &cfg, phase, |_, _| {}).unwrap();
            cfg.parallel = true;
            let mut b = p0.clone();
            let sb = train(&mut b, &data, &cfg, phase, |_, _| {}).unwrap();
            assert_eq!(a, b);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn phases_respect_their_groups() {
        let (p0, data) = tiny(2, 6);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut a = p0.clone();
        train(&mut a, &data, &cfg, Phase::Asr, |_, _| {}).unwrap();
        assert_eq!(a.flat_values(|g| !g.is_asr()), p0.flat_values(|g| !g.is_asr()));
        assert_ne!(a.flat_values(|g| g.is_asr()), p0.flat_values(|g| g.is_asr()));
        assert!(!a.is_group_frozen(ParamGroup::AuxJoint));
        let mut b = a.clone();
        train(&mut b, &data, &cfg, Phase::Aux, |_, _| {}).unwrap();
        assert_eq!(b.flat_values(|g| g.is_asr()), a.flat_values(|g| g.is_asr()));
        assert_ne!(b.flat_values(|g| !g.is_asr()), a.flat_values(|g| !g.is_asr()));
        assert!(b.asr_frozen());
    }

    #[test]
    fn full_batch_descent_is_nearly_monotone() {
        let (mut p, data) = tiny(3, 5);
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 5,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 0.0,
            loss_weights: LossWeights { asr: 1.0, aux: 1.0 },
            ..TrainConfig::default()
        };
        let stats = train(&mut p, &data, &cfg, Phase::Joint, |_, _| {}).unwrap();
        let ups = stats.losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups * 20 <= stats.losses.len(), "{ups} increases");
        assert!(stats.losses[49] < stats.losses[0]);
    }

    #[test]
    fn adam_and_clip_behave() {
        let (mut p, data) = tiny(4, 4);
        let before = mean_loss(&p, &data, Phase::Asr, &TrainConfig::default()).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut p, &data, &cfg, Phase::Asr, |_, _| {}).unwrap();
        assert!(mean_loss(&p, &data, Phase::Asr, &cfg).unwrap() < before);
        p.zero_grads();
        for (_, _, t) in p.named_params_mut() {
            t.grad.fill(1.0);
        }
        let n = p.num_params() as f64;
        assert!((clip_grad_norm(&mut p, 1.0) - n.sqrt()).abs() < 1e-9);
        assert!((clip_grad_norm(&mut p, 0.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_config() {
        let (mut p, data) = tiny(5, 2);
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut p, &data, &cfg, Phase::Asr, |_, _| {}).is_err());
        assert!(train(&mut p, &[], &TrainConfig::default(), Phase::Asr, |_, _| {}).is_err());
    }
}
