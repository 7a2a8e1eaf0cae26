//! The synthetic corpus: a lexicon, disjoint train/test speaker pools and
//! simulated conversation sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    sample_profiles, simulate_conversation, synth_utterance, Conversation, GapConfig, Lexicon, SpeakerPool,
    SpeakerProfile, SynthConfig, Vocab,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub gaps: GapConfig,
    pub lexicon_size: usize,
    pub train_speakers: usize,
    pub test_speakers: usize,
    /// Utterances rendered per pool speaker.
    pub pool_utterances: usize,
    /// Inclusive word-count range of a source utterance.
    pub words_per_utterance: (usize, usize),
    /// Speakers per training conversation.
    pub speakers: usize,
    /// Utterances sampled per speaker in a conversation.
    pub utterances_per_speaker: usize,
    pub train_conversations: usize,
    pub test_conversations: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            synth: SynthConfig::default(),
            gaps: GapConfig::default(),
            lexicon_size: 63,
            train_speakers: 200,
            test_speakers: 20,
            pool_utterances: 20,
            words_per_utterance: (3, 6),
            speakers: 2,
            utterances_per_speaker: 2,
            train_conversations: 500,
            test_conversations: 100,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.gaps.validate()?;
        let (lo, hi) = self.words_per_utterance;
        if lo == 0 || hi < lo {
            return Err(Error::Invalid("words_per_utterance must be a non-empty positive range".into()));
        }
        if self.lexicon_size < 2 {
            return Err(Error::Invalid("lexicon_size must be at least 2".into()));
        }
        if self.pool_utterances < self.utterances_per_speaker {
            return Err(Error::Invalid("pool_utterances is below utterances_per_speaker".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub train_pool: SpeakerPool,
    pub test_pool: SpeakerPool,
    pub train: Vec<Conversation>,
}

/// Independent generator for stream `stream` of `seed`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LEXICON_STREAM: u64 = 1;
const TRAIN_POOL_STREAM: u64 = 2;
const TEST_POOL_STREAM: u64 = 3;
const TRAIN_SET_STREAM: u64 = 1 << 32;

fn build_pool(cfg: &CorpusConfig, lexicon: &Lexicon, stream: u64, profiles: &[SpeakerProfile]) -> Result<SpeakerPool> {
    let mut rng = stream_rng(cfg.seed, stream);
    let names: Vec<String> = profiles.iter().map(|p| p.name.clone()).collect();
    let utterances = profiles
        .iter()
        .map(|p| {
            (0..cfg.pool_utterances)
                .map(|u| {
                    let (lo, hi) = cfg.words_per_utterance;
                    let len = rng.random_range(lo..=hi);
                    let text = lexicon.sample_text(len, &mut rng);
                    synth_utterance(format!("{}_u{u:02}", p.name), p, &text, lexicon, &cfg.synth, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeakerPool { speakers: names, utterances })
}

/// Lexicon, word-level vocabulary, both speaker pools and the training set.
/// Train and test pools never share a speaker.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, LEXICON_STREAM);
    let lexicon = Lexicon::generate(cfg.lexicon_size, cfg.synth.content_dims, &mut rng)?;
    let vocab = Vocab::word_level(lexicon.words.iter().map(String::as_str))?;
    let mut names: Vec<String> = (0..cfg.train_speakers).map(|i| format!("train{i:03}")).collect();
    names.extend((0..cfg.test_speakers).map(|i| format!("test{i:03}")));
    let profiles = sample_profiles(&names, &cfg.synth, &mut rng)?;
    let (train_p, test_p) = profiles.split_at(cfg.train_speakers);
    let train_pool = build_pool(cfg, &lexicon, TRAIN_POOL_STREAM, train_p)?;
    let test_pool = build_pool(cfg, &lexicon, TEST_POOL_STREAM, test_p)?;
    let train = simulate_set(
        &train_pool,
        "train",
        cfg.speakers,
        cfg.utterances_per_speaker,
        cfg.train_conversations,
        &cfg.gaps,
        cfg.synth.frame_step,
        cfg.seed ^ TRAIN_SET_STREAM,
    )?;
    Ok(Corpus {
        lexicon,
        vocab,
        train_pool,
        test_pool,
        train,
    })
}

/// `count` conversations with `m` speakers each; conversation `i` uses its own
/// generator stream, so the result does not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn simulate_set(
    pool: &SpeakerPool,
    prefix: &str,
    m: usize,
    n_utt: usize,
    count: usize,
    gaps: &GapConfig,
    frame_step: f64,
    seed: u64,
) -> Result<Vec<Conversation>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            simulate_conversation(format!("{prefix}_{m}spk_{i:04}"), pool, m, n_utt, gaps, frame_step, &mut rng)
        })
        .collect()
}
