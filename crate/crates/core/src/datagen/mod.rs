//! Targets, the conversation simulator and the synthetic utterance generator.

mod corpus;
mod simulate;
mod synth;
mod vocab;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, simulate_set, Corpus, CorpusConfig};
pub use simulate::{segment_conversation, simulate_conversation, GapConfig, SpeakerPool};
pub use synth::{
    sample_profiles, synth_utterance, Lexicon, SourceUtterance, SpeakerProfile, SynthConfig,
};
pub use vocab::{Tokenizer, Vocab, BLANK_PIECE, WORD_BOUNDARY};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    pub start: f64,
    pub end: f64,
    pub raw_speaker: String,
}

impl TimedWord {
    pub fn new(text: impl Into<String>, start: f64, end: f64, raw_speaker: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            start,
            end,
            raw_speaker: raw_speaker.into(),
        }
    }
}

/// Start, then end, then raw speaker label.
pub fn word_order(a: &TimedWord, b: &TimedWord) -> Ordering {
    a.start
        .total_cmp(&b.start)
        .then(a.end.total_cmp(&b.end))
        .then_with(|| a.raw_speaker.cmp(&b.raw_speaker))
}

/// Raw speaker names in order of first speaking; name `k` gets id `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpeakerMap {
    order: Vec<String>,
}

impl SpeakerMap {
    pub fn id(&self, raw: &str) -> Option<usize> {
        self.order.iter().position(|r| r == raw).map(|i| i + 1)
    }

    pub fn raw(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.order.get(i)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// First-come-first-serve speaker ids. Ids are returned in input order; the
/// speaking order is taken from [`word_order`], so unsorted input is fine.
pub fn canonicalize_speakers(words: &[TimedWord], max_speakers: usize) -> Result<(SpeakerMap, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..words.len()).collect();
    idx.sort_by(|&a, &b| word_order(&words[a], &words[b]));
    let mut map = SpeakerMap::default();
    for &i in &idx {
        let raw = &words[i].raw_speaker;
        if map.id(raw).is_none() {
            map.order.push(raw.clone());
        }
    }
    if map.len() > max_speakers {
        return Err(Error::TooManySpeakers {
            found: map.len(),
            max: max_speakers,
        });
    }
    let ids = words.iter().map(|w| map.id(&w.raw_speaker).expect("mapped")).collect();
    Ok((map, ids))
}

/// Wordpiece targets with a same-length speaker sequence: every piece inherits
/// the speaker id of its word.
pub fn build_targets(
    words: &[TimedWord],
    speaker_ids: &[usize],
    vocab: &Vocab,
    tokenizer: Tokenizer,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if words.len() != speaker_ids.len() {
        return Err(Error::Invalid(format!(
            "{} words but {} speaker ids",
            words.len(),
            speaker_ids.len()
        )));
    }
    let mut pieces = Vec::new();
    let mut speakers = Vec::new();
    let mut oov = Vec::new();
    for (w, &s) in words.iter().zip(speaker_ids) {
        match tokenizer.tokenize(vocab, &w.text) {
            Some(ids) => {
                speakers.extend(std::iter::repeat_n(s, ids.len()));
                pieces.extend(ids);
            }
            None => {
                if !oov.contains(&w.text) {
                    oov.push(w.text.clone());
                }
            }
        }
    }
    if !oov.is_empty() {
        return Err(Error::OutOfVocabulary(oov));
    }
    Ok((pieces, speakers))
}

/// Where a source utterance was placed in a conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub speaker: String,
    pub utterance: String,
    /// Seconds from the conversation start.
    pub offset: f64,
    pub duration: f64,
    /// Silence inserted before this utterance (zero for the first).
    pub pause_before: f64,
    pub crossfade_before: f64,
    /// Range of this utterance's words in [`Conversation::words`].
    pub first_word: usize,
    pub word_count: usize,
}

impl Placement {
    pub fn end(&self) -> f64 {
        self.offset + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub features: Tensor2,
    /// Sorted by [`word_order`].
    pub words: Vec<TimedWord>,
    pub sources: Vec<Placement>,
    pub duration: f64,
    pub frame_step: f64,
}

impl Conversation {
    pub fn speaker_ids(&self, max_speakers: usize) -> Result<Vec<usize>> {
        Ok(canonicalize_speakers(&self.words, max_speakers)?.1)
    }

    pub fn distinct_speakers(&self) -> usize {
        let mut raw: Vec<&str> = self.words.iter().map(|w| w.raw_speaker.as_str()).collect();
        raw.sort_unstable();
        raw.dedup();
        raw.len()
    }
}

/// Frames needed to cover `duration` seconds.
pub fn frame_count(duration: f64, frame_step: f64) -> usize {
    (duration / frame_step - 1e-9).ceil().max(0.0) as usize
}
