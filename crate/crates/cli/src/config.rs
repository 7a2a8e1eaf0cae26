//! Run configuration, read from TOML. Every section is optional and unknown
//! keys are rejected.
//!
//! ```toml
//! [model]            # network shapes
//! d_features = 16
//! asr_layers = 3
//! tap_layer = 2
//!
//! [train]
//! seed = 7
//! asr_steps = 5000
//! aux_steps = 1500
//! batch_size = 8
//! learning_rate = 0.005
//! optimizer = "adam"            # or "sgd"
//!
//! [data]
//! dir = "data"
//! test_speaker_counts = [2, 3, 4]
//! segment_lengths = [15.0, 30.0, 60.0]
//!
//! [data.simulator]   # corpus generator, with [data.simulator.synth] and [data.simulator.gaps]
//! seed = 17
//!
//! [eval]
//! mapping = "identity"          # or "best_permutation"
//! beam_size = 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weend::datagen::CorpusConfig;
use weend::metrics::SpeakerMapping;
use weend::model::ModelConfig;
use weend::train::{OptimizerKind, TrainConfig};
use weend::transducer::LossWeights;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub asr_steps: usize,
    pub aux_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate relative to `learning_rate`, reached by linear decay.
    pub final_lr_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
    /// Loss weights for the auxiliary phase. Anything other than aux-only
    /// requires `freeze_asr = false`.
    pub loss_weights: LossWeights,
    /// Let the auxiliary loss reach the ASR through the shared blank logit.
    pub aux_blank_gradient: bool,
    pub freeze_asr: bool,
    /// Per-example gradients on worker threads; results are bit-identical.
    pub parallel: bool,
    /// Steps between loss log lines.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 7,
            asr_steps: 5000,
            aux_steps: 1500,
            batch_size: 8,
            learning_rate: 5e-3,
            final_lr_fraction: 1.0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            loss_weights: LossWeights::AUX_ONLY,
            aux_blank_gradient: false,
            freeze_asr: true,
            parallel: false,
            log_every: 100,
        }
    }
}

impl TrainSection {
    pub fn trainer(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            loss_weights: self.loss_weights,
            aux_blank_gradient: self.aux_blank_gradient,
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Where `simulate` writes and the other commands look by default.
    pub dir: PathBuf,
    pub simulator: CorpusConfig,
    /// Speaker count M of each held-out set.
    pub test_speaker_counts: Vec<usize>,
    /// Utterances per speaker in held-out conversations.
    pub test_utterances_per_speaker: usize,
    /// Seconds; each held-out set is also written segmented to these lengths.
    pub segment_lengths: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            simulator: CorpusConfig::default(),
            test_speaker_counts: vec![2, 3, 4],
            test_utterances_per_speaker: 2,
            segment_lengths: vec![15.0, 30.0, 60.0],
        }
    }
}

impl DataSection {
    pub fn train_manifest(&self) -> PathBuf {
        self.dir.join(TRAIN_MANIFEST)
    }

    pub fn test_manifest(&self, m: usize) -> PathBuf {
        self.dir.join(test_manifest_name(m))
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join(VOCAB_FILE)
    }
}

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FEATURE_DIR: &str = "features";

pub fn test_manifest_name(m: usize) -> String {
    format!("test_{m}spk.jsonl")
}

pub fn segmented_manifest_name(m: usize, seconds: f64) -> String {
    format!("test_{m}spk_seg{seconds}s.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mapping: SpeakerMapping,
    /// 1 runs greedy search.
    pub beam_size: usize,
    pub max_emissions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mapping: SpeakerMapping::Identity,
            beam_size: 1,
            max_emissions: weend::decode::DEFAULT_MAX_EMISSIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model section")?;
        self.train.trainer(0).validate().context("train section")?;
        self.data.simulator.validate().context("data.simulator section")?;
        let sim = &self.data.simulator;
        if self.model.d_features != sim.synth.feature_dims() {
            bail!(UsageError(format!(
                "model.d_features is {} but the simulator produces {} dims",
                self.model.d_features,
                sim.synth.feature_dims()
            )));
        }
        if self.model.vocab_size != sim.lexicon_size + 1 {
            bail!(UsageError(format!(
                "model.vocab_size is {} but the lexicon needs {} (words plus blank)",
                self.model.vocab_size,
                sim.lexicon_size + 1
            )));
        }
        let max_m = self.data.test_speaker_counts.iter().copied().chain([sim.speakers]).max().unwrap_or(0);
        if max_m > self.model.max_speakers {
            bail!(UsageError(format!(
                "conversations with {max_m} speakers exceed model.max_speakers = {}",
                self.model.max_speakers
            )));
        }
        if self.data.test_speaker_counts.contains(&0) || sim.speakers == 0 {
            bail!(UsageError("speaker counts must be positive".into()));
        }
        if self.data.test_utterances_per_speaker == 0 || self.data.test_utterances_per_speaker > sim.pool_utterances {
            bail!(UsageError("data.test_utterances_per_speaker must be in 1..=pool_utterances".into()));
        }
        if self.data.segment_lengths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(UsageError("data.segment_lengths must be positive".into()));
        }
        if self.train.freeze_asr && self.train.loss_weights.asr != 0.0 {
            bail!(UsageError("train.loss_weights.asr must be 0 while the ASR is frozen".into()));
        }
        if self.eval.beam_size == 0 || self.eval.max_emissions == 0 {
            bail!(UsageError("eval.beam_size and eval.max_emissions must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults_validate() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.train.seed = 99;
        cfg.eval.mapping = SpeakerMapping::BestPermutation;
        cfg.data.segment_lengths = vec![0.5, 2.25];
        cfg.data.simulator.synth.noise_sigma = 0.125;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nseed = 3\n[eval]\nbeam_size = 4\n").unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.eval.beam_size, 4);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_shapes() {
        assert!(RunConfig::from_toml("[train]\nsteps = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[data.simulator.synth]\nwarp = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_features = 12\n").is_err());
        assert!(RunConfig::from_toml("[data]\ntest_speaker_counts = [5]\n").is_err());
        assert!(RunConfig::from_toml("[train]\nloss_weights = { asr = 1.0, aux = 1.0 }\n").is_err());
        assert!(RunConfig::from_toml("[model]\ntap_layer = 4\n").is_err());
    }
}
