//! Multi-speaker conversations from single-speaker utterances, and
//! sentence-boundary segmentation.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{frame_count, word_order, Conversation, Placement, SourceUtterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    /// Silence inserted between consecutive utterances, seconds.
    pub pause: (f64, f64),
    /// Linear crossfade at each junction, seconds.
    pub crossfade: (f64, f64),
    /// How many utterances may be dropped; `K` is uniform over `0..=max_drop`.
    pub max_drop: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            pause: (0.2, 1.5),
            crossfade: (0.0, 0.2),
            max_drop: 2,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo >= 0.0 && hi >= lo && hi.is_finite();
        if !ok(self.pause) || !ok(self.crossfade) {
            return Err(Error::Invalid("pause and crossfade ranges must be ordered and non-negative".into()));
        }
        if self.crossfade.1 > self.pause.0 {
            return Err(Error::Invalid("crossfade may not exceed the shortest pause".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    pub fn sample_pause<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Self::draw(self.pause, rng)
    }

    pub fn sample_crossfade<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Self::draw(self.crossfade, rng)
    }
}

/// Rendered utterances grouped by speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPool {
    pub speakers: Vec<String>,
    pub utterances: Vec<Vec<SourceUtterance>>,
}

impl SpeakerPool {
    pub fn feature_dims(&self) -> Option<usize> {
        self.utterances.iter().flatten().next().map(|u| u.features.cols())
    }
}

/// Samples `m` speakers and `n_utt` utterances from each, drops `K` of them
/// (never all of one speaker's), shuffles, and concatenates with a random
/// pause and crossfade at every junction.
pub fn simulate_conversation<R: Rng + ?Sized>(
    id: impl Into<String>,
    pool: &SpeakerPool,
    m: usize,
    n_utt: usize,
    gaps: &GapConfig,
    frame_step: f64,
    rng: &mut R,
) -> Result<Conversation> {
    gaps.validate()?;
    if m == 0 || n_utt == 0 {
        return Err(Error::Invalid("speakers and utterances per speaker must be positive".into()));
    }
    if pool.speakers.len() < m {
        return Err(Error::Invalid(format!(
            "pool has {} speakers, {m} requested",
            pool.speakers.len()
        )));
    }
    let dims = pool.feature_dims().ok_or_else(|| Error::Invalid("speaker pool is empty".into()))?;

    let chosen = index::sample(rng, pool.speakers.len(), m).into_vec();
    let mut picked: Vec<(usize, &SourceUtterance)> = Vec::with_capacity(m * n_utt);
    for (slot, &s) in chosen.iter().enumerate() {
        let utts = &pool.utterances[s];
        if utts.len() < n_utt {
            return Err(Error::Invalid(format!(
                "speaker {} has {} utterances, {n_utt} requested",
                pool.speakers[s],
                utts.len()
            )));
        }
        for u in index::sample(rng, utts.len(), n_utt) {
            picked.push((slot, &utts[u]));
        }
    }

    let k = rng.random_range(0..=gaps.max_drop).min(m * n_utt - m);
    let keep = loop {
        let drop = index::sample(rng, picked.len(), k).into_vec();
        let keep: Vec<usize> = (0..picked.len()).filter(|i| !drop.contains(i)).collect();
        if (0..m).all(|slot| keep.iter().any(|&i| picked[i].0 == slot)) {
            break keep;
        }
    };
    let mut order: Vec<&SourceUtterance> = keep.into_iter().map(|i| picked[i].1).collect();
    order.shuffle(rng);

    let mut sources = Vec::with_capacity(order.len());
    let mut cursor = 0.0;
    for (i, u) in order.iter().enumerate() {
        let (pause, xfade) = if i == 0 {
            (0.0, 0.0)
        } else {
            (gaps.sample_pause(rng), gaps.sample_crossfade(rng))
        };
        let offset = cursor + pause - xfade;
        let duration = u.duration(frame_step);
        sources.push(Placement {
            speaker: u.speaker.clone(),
            utterance: u.id.clone(),
            offset,
            duration,
            pause_before: pause,
            crossfade_before: xfade,
            first_word: 0,
            word_count: u.words.len(),
        });
        cursor = offset + duration;
    }
    let duration = cursor;
    let total = frame_count(duration, frame_step);
    let mut features = Tensor2::zeros(total, dims);
    let mut words = Vec::new();
    for (p, u) in sources.iter_mut().zip(&order) {
        let start_frame = (p.offset / frame_step).round() as usize;
        for r in 0..u.features.rows() {
            let f = start_frame + r;
            if f >= total {
                break;
            }
            // fade-in over the crossfade; the faded-out side is silence
            let t = (r as f64 + 0.5) * frame_step;
            let gain = if p.crossfade_before > 0.0 { (t / p.crossfade_before).min(1.0) } else { 1.0 };
            for (o, v) in features.row_mut(f).iter_mut().zip(u.features.row(r)) {
                *o += gain * v;
            }
        }
        p.first_word = words.len();
        words.extend(u.words.iter().map(|w| {
            let mut w = w.clone();
            w.start += p.offset;
            w.end += p.offset;
            w
        }));
    }
    debug_assert!(words.windows(2).all(|w| word_order(&w[0], &w[1]).is_le()));
    Ok(Conversation {
        id: id.into(),
        features,
        words,
        sources,
        duration,
        frame_step,
    })
}

/// Cuts a conversation at utterance boundaries into pieces of at most
/// `target` seconds (greedy largest prefix). An utterance longer than the
/// target forms its own segment. A conversation that already fits is
/// returned unchanged.
pub fn segment_conversation(conv: &Conversation, target: f64) -> Result<Vec<Conversation>> {
    if !(target > 0.0) {
        return Err(Error::Domain("segment length must be positive".into()));
    }
    if conv.duration <= target || conv.sources.len() <= 1 {
        return Ok(vec![conv.clone()]);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < conv.sources.len() {
        let start = conv.sources[i].offset;
        let mut j = i + 1;
        while j < conv.sources.len() && conv.sources[j].end() - start <= target {
            j += 1;
        }
        out.push(cut(conv, i, j, out.len(), target));
        i = j;
    }
    Ok(out)
}

fn cut(conv: &Conversation, i: usize, j: usize, k: usize, target: f64) -> Conversation {
    let step = conv.frame_step;
    let start = conv.sources[i].offset;
    let end = conv.sources[i..j].iter().map(Placement::end).fold(f64::MIN, f64::max);
    let duration = end - start;
    let first_frame = (start / step).round() as usize;
    let rows = frame_count(duration, step);
    let mut features = Tensor2::zeros(rows, conv.features.cols());
    for r in 0..rows {
        if first_frame + r < conv.features.rows() {
            features.row_mut(r).copy_from_slice(conv.features.row(first_frame + r));
        }
    }
    let w0 = conv.sources[i].first_word;
    let w1 = conv.sources[j - 1].first_word + conv.sources[j - 1].word_count;
    let words = conv.words[w0..w1]
        .iter()
        .map(|w| {
            let mut w = w.clone();
            w.start -= start;
            w.end -= start;
            w
        })
        .collect();
    let sources = conv.sources[i..j]
        .iter()
        .map(|p| Placement {
            offset: p.offset - start,
            first_word: p.first_word - w0,
            ..p.clone()
        })
        .collect();
    Conversation {
        id: format!("{}_s{}_{k}", conv.id, target),
        features,
        words,
        sources,
        duration,
        frame_step: step,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{sample_profiles, synth_utterance, Lexicon, SynthConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(speakers: usize, per: usize, words: usize, seed: u64) -> (SpeakerPool, SynthConfig) {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lex = Lexicon::generate(30, cfg.content_dims, &mut rng).unwrap();
        let names: Vec<String> = (0..speakers).map(|i| format!("spk{i}")).collect();
        let profiles = sample_profiles(&names, &cfg, &mut rng).unwrap();
        let utterances = profiles
            .iter()
            .map(|p| {
                (0..per)
                    .map(|u| {
                        let text = lex.sample_text(words, &mut rng);
                        synth_utterance(format!("{}_{u}", p.name), p, &text, &lex, &cfg, &mut rng).unwrap()
                    })
                    .collect()
            })
            .collect();
        (SpeakerPool { speakers: names, utterances }, cfg)
    }

    #[test]
    fn placed_count_and_distinct_speakers() {
        let (p, cfg) = pool(5, 4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = simulate_conversation("c", &p, 2, 2, &GapConfig::default(), cfg.frame_step, &mut rng).unwrap();
            assert!((2..=4).contains(&c.sources.len()));
            assert_eq!(c.distinct_speakers(), 2);
        }
        let fixed = GapConfig {
            max_drop: 1,
            ..GapConfig::default()
        };
        let mut seen = [false; 2];
        for _ in 0..100 {
            let c = simulate_conversation("c", &p, 2, 2, &fixed, cfg.frame_step, &mut rng).unwrap();
            seen[4 - c.sources.len()] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn duration_identity_and_frame_count() {
        let (p, cfg) = pool(4, 3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let c = simulate_conversation("c", &p, 3, 2, &GapConfig::default(), cfg.frame_step, &mut rng).unwrap();
            let sum: f64 = c.sources.iter().map(|s| s.duration + s.pause_before - s.crossfade_before).sum();
            assert!((c.duration - sum).abs() <= cfg.frame_step);
            assert_eq!(c.features.rows(), frame_count(c.duration, cfg.frame_step));
            assert!(c.words.iter().all(|w| w.start >= 0.0 && w.end <= c.duration + 1e-9));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (p, cfg) = pool(4, 3, 3, 5);
        let a = simulate_conversation("c", &p, 2, 2, &GapConfig::default(), cfg.frame_step, &mut ChaCha8Rng::seed_from_u64(9));
        let b = simulate_conversation("c", &p, 2, 2, &GapConfig::default(), cfg.frame_step, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let (p, cfg) = pool(2, 1, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(simulate_conversation("c", &p, 3, 1, &GapConfig::default(), cfg.frame_step, &mut rng).is_err());
        assert!(simulate_conversation("c", &p, 2, 2, &GapConfig::default(), cfg.frame_step, &mut rng).is_err());
    }

    fn manual(durations: &[f64]) -> Conversation {
        let mut sources = Vec::new();
        let mut words = Vec::new();
        let mut t = 0.0;
        for (i, &d) in durations.iter().enumerate() {
            sources.push(Placement {
                speaker: format!("s{}", i % 2),
                utterance: format!("u{i}"),
                offset: t,
                duration: d,
                pause_before: 0.0,
                crossfade_before: 0.0,
                first_word: words.len(),
                word_count: 2,
            });
            words.push(super::super::TimedWord::new("a", t, t + d / 2.0, format!("s{}", i % 2)));
            words.push(super::super::TimedWord::new("b", t + d / 2.0, t + d, format!("s{}", i % 2)));
            t += d;
        }
        Conversation {
            id: "m".into(),
            features: Tensor2::zeros(frame_count(t, 0.1), 2),
            words,
            sources,
            duration: t,
            frame_step: 0.1,
        }
    }

    #[test]
    fn greedy_segmentation_rule() {
        let c = manual(&[10.0, 10.0, 10.0]);
        let segs = segment_conversation(&c, 15.0).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| (s.duration - 10.0).abs() < 1e-9 && s.words.len() == 2));
        let segs = segment_conversation(&c, 25.0).unwrap();
        assert_eq!(segs.iter().map(|s| s.sources.len()).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(segment_conversation(&c, 60.0).unwrap(), vec![c.clone()]);
        let long = manual(&[20.0, 5.0]);
        let segs = segment_conversation(&long, 15.0).unwrap();
        assert_eq!(segs.iter().map(|s| s.sources.len()).collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn segments_partition_words_without_cutting_them() {
        let (p, cfg) = pool(4, 6, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let c = simulate_conversation("c", &p, 3, 3, &GapConfig::default(), cfg.frame_step, &mut rng).unwrap();
            for target in [3.0, 5.0, 8.0] {
                let segs = segment_conversation(&c, target).unwrap();
                let mut rebuilt = Vec::new();
                for s in &segs {
                    let base = s.sources[0].offset;
                    assert!(base.abs() < 1e-12);
                    assert_eq!(s.features.rows(), frame_count(s.duration, cfg.frame_step));
                    for w in &s.words {
                        assert!(w.start >= -1e-9 && w.end <= s.duration + 1e-9);
                    }
                    let shift = c.sources.iter().find(|x| x.utterance == s.sources[0].utterance).unwrap().offset;
                    rebuilt.extend(s.words.iter().map(|w| (w.text.clone(), w.start + shift)));
                }
                assert_eq!(rebuilt.len(), c.words.len());
                for (a, b) in rebuilt.iter().zip(&c.words) {
                    assert_eq!(a.0, b.text);
                    assert!((a.1 - b.start).abs() < 1e-9);
                }
            }
        }
    }
}
