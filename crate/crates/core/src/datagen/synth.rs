//! Synthetic stand-in for recorded speech. Each word spans a fixed number of
//! frames: the leading dims carry the word's content code under a sine
//! envelope, the trailing dims carry the speaker's signature vector.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TimedWord;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub content_dims: usize,
    pub signature_dims: usize,
    pub frames_per_word: usize,
    /// Seconds per frame.
    pub frame_step: f64,
    pub noise_sigma: f64,
    /// Peak norm of a word's content code.
    pub content_scale: f64,
    /// Norm of every speaker signature.
    pub signature_scale: f64,
    /// Minimum angle between any two speaker signatures, in degrees.
    pub min_profile_angle_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            content_dims: 10,
            signature_dims: 6,
            frames_per_word: 4,
            frame_step: 0.1,
            noise_sigma: 0.05,
            content_scale: 3.0,
            signature_scale: 1.0,
            min_profile_angle_deg: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn feature_dims(&self) -> usize {
        self.content_dims + self.signature_dims
    }

    pub fn word_duration(&self) -> f64 {
        self.frames_per_word as f64 * self.frame_step
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_dims == 0 || self.signature_dims == 0 || self.frames_per_word == 0 {
            return Err(Error::Invalid("synth dims and frames_per_word must be positive".into()));
        }
        if !(self.frame_step > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("synth frame_step and noise_sigma out of range".into()));
        }
        if !(self.content_scale > 0.0) || !(self.signature_scale > 0.0) {
            return Err(Error::Invalid("synth content_scale and signature_scale must be positive".into()));
        }
        if !(0.0..180.0).contains(&self.min_profile_angle_deg) {
            return Err(Error::Invalid("min_profile_angle_deg must be in [0, 180)".into()));
        }
        Ok(())
    }

    fn envelope(&self, k: usize) -> f64 {
        (std::f64::consts::PI * (k as f64 + 0.5) / self.frames_per_word as f64).sin()
    }
}

/// Pseudo-words with their content codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub codes: Vec<Vec<f64>>,
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

impl Lexicon {
    /// `size` distinct two-syllable words with unit-norm Gaussian codes.
    pub fn generate<R: Rng + ?Sized>(size: usize, content_dims: usize, rng: &mut R) -> Result<Self> {
        let syllables: Vec<String> = ONSETS.iter().flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}"))).collect();
        let max = syllables.len() * syllables.len();
        if size > max {
            return Err(Error::Invalid(format!("lexicon size {size} exceeds {max}")));
        }
        let mut words: Vec<String> = Vec::with_capacity(size);
        while words.len() < size {
            let w = format!(
                "{}{}",
                syllables[rng.random_range(0..syllables.len())],
                syllables[rng.random_range(0..syllables.len())]
            );
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let codes = (0..size).map(|_| unit_gaussian(content_dims, rng)).collect();
        Ok(Self { words, codes })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Random word sequence without immediate repeats.
    pub fn sample_text<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<String> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let k = rng.random_range(0..self.len());
            if out.last() != Some(&k) || self.len() == 1 {
                out.push(k);
            }
        }
        out.into_iter().map(|k| self.words[k].clone()).collect()
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub name: String,
    pub signature: Vec<f64>,
}

/// Signatures on a sphere of radius `signature_scale`, drawn by rejection so
/// that every pair is at least `min_profile_angle_deg` apart.
pub fn sample_profiles<R: Rng + ?Sized>(
    names: &[String],
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<SpeakerProfile>> {
    cfg.validate()?;
    let min_cos = cfg.min_profile_angle_deg.to_radians().cos();
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    const MAX_TRIES: usize = 100_000;
    for _ in 0..names.len() {
        let mut tries = 0;
        let v = loop {
            let v = unit_gaussian(cfg.signature_dims, rng);
            if sigs.iter().all(|s| s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= min_cos) {
                break v;
            }
            tries += 1;
            if tries == MAX_TRIES {
                return Err(Error::Invalid(format!(
                    "cannot place {} profiles {}° apart in {} dims",
                    names.len(),
                    cfg.min_profile_angle_deg,
                    cfg.signature_dims
                )));
            }
        };
        sigs.push(v);
    }
    Ok(names
        .iter()
        .zip(sigs)
        .map(|(n, s)| SpeakerProfile {
            name: n.clone(),
            signature: s.into_iter().map(|x| x * cfg.signature_scale).collect(),
        })
        .collect())
}

/// A rendered single-speaker utterance with word times relative to its start.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceUtterance {
    pub id: String,
    pub speaker: String,
    pub features: Tensor2,
    pub words: Vec<TimedWord>,
}

impl SourceUtterance {
    pub fn duration(&self, frame_step: f64) -> f64 {
        self.features.rows() as f64 * frame_step
    }
}

pub fn synth_utterance<R: Rng + ?Sized>(
    id: impl Into<String>,
    speaker: &SpeakerProfile,
    text: &[String],
    lexicon: &Lexicon,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<SourceUtterance> {
    cfg.validate()?;
    if text.is_empty() {
        return Err(Error::Invalid("utterance text is empty".into()));
    }
    if speaker.signature.len() != cfg.signature_dims {
        return Err(Error::Invalid("speaker signature has the wrong dimension".into()));
    }
    let fpw = cfg.frames_per_word;
    let mut features = Tensor2::zeros(text.len() * fpw, cfg.feature_dims());
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut words = Vec::with_capacity(text.len());
    for (i, w) in text.iter().enumerate() {
        let code = &lexicon.codes[lexicon
            .index_of(w)
            .ok_or_else(|| Error::OutOfVocabulary(vec![w.clone()]))?];
        for k in 0..fpw {
            let env = cfg.content_scale * cfg.envelope(k);
            let row = features.row_mut(i * fpw + k);
            for (d, c) in code.iter().enumerate() {
                row[d] = env * c + noise.sample(rng);
            }
            for (d, s) in speaker.signature.iter().enumerate() {
                row[cfg.content_dims + d] = s + noise.sample(rng);
            }
        }
        let start = (i * fpw) as f64 * cfg.frame_step;
        words.push(TimedWord::new(w.clone(), start, start + cfg.word_duration(), speaker.name.clone()));
    }
    Ok(SourceUtterance {
        id: id.into(),
        speaker: speaker.name.clone(),
        features,
        words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(sigma: f64) -> (SynthConfig, Lexicon, Vec<SpeakerProfile>, ChaCha8Rng) {
        let cfg = SynthConfig {
            noise_sigma: sigma,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lex = Lexicon::generate(20, cfg.content_dims, &mut rng).unwrap();
        let names: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let profiles = sample_profiles(&names, &cfg, &mut rng).unwrap();
        (cfg, lex, profiles, rng)
    }

    #[test]
    fn noiseless_signatures_repeat_exactly() {
        let (cfg, lex, p, mut rng) = setup(0.0);
        let a = synth_utterance("a", &p[0], &lex.sample_text(3, &mut rng), &lex, &cfg, &mut rng).unwrap();
        let b = synth_utterance("b", &p[0], &lex.sample_text(5, &mut rng), &lex, &cfg, &mut rng).unwrap();
        let sig = |u: &SourceUtterance, r: usize| u.features.row(r)[cfg.content_dims..].to_vec();
        assert_eq!(sig(&a, 0), sig(&b, 7));
        assert_eq!(a.features.rows(), 3 * cfg.frames_per_word);
        assert_eq!(b.words.len(), 5);
        assert!((b.words[4].end - 2.0).abs() < 1e-12);
    }

    #[test]
    fn profiles_respect_minimum_separation() {
        let (cfg, lex, p, mut rng) = setup(0.0);
        let min_dist = 2.0 * cfg.signature_scale * (cfg.min_profile_angle_deg.to_radians() / 2.0).sin();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let a = synth_utterance("a", &p[i], &lex.sample_text(1, &mut rng), &lex, &cfg, &mut rng).unwrap();
                let b = synth_utterance("b", &p[j], &lex.sample_text(1, &mut rng), &lex, &cfg, &mut rng).unwrap();
                let d: f64 = a.features.row(0)[cfg.content_dims..]
                    .iter()
                    .zip(&b.features.row(0)[cfg.content_dims..])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= min_dist - 1e-12, "{d} < {min_dist}");
            }
        }
    }

    #[test]
    fn sampled_text_never_repeats_adjacent_words() {
        let (_, lex, _, mut rng) = setup(0.0);
        let t = lex.sample_text(500, &mut rng);
        assert!(t.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn impossible_packing_is_reported() {
        let cfg = SynthConfig {
            signature_dims: 1,
            min_profile_angle_deg: 90.0,
            ..SynthConfig::default()
        };
        let names: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        assert!(sample_profiles(&names, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
