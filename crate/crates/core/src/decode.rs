//! Synchronized greedy and beam decoding. Every non-blank wordpiece emission
//! carries the argmax speaker of the auxiliary joint at the same lattice point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Vocab, WORD_BOUNDARY};
use crate::error::{Error, Result};
use crate::model::{hat_log_posterior, JointKind, ModelParams};
use crate::numerics::{argmax, logaddexp, Tensor2};

pub const DEFAULT_MAX_EMISSIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiarizedHypothesis {
    pub wordpieces: Vec<usize>,
    pub speakers: Vec<usize>,
    pub frames: Vec<usize>,
    pub score: f64,
}

impl DiarizedHypothesis {
    pub fn len(&self) -> usize {
        self.wordpieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wordpieces.is_empty()
    }

    fn push(&mut self, token: usize, speaker: usize, frame: usize) {
        self.wordpieces.push(token);
        self.speakers.push(speaker);
        self.frames.push(frame);
    }
}

/// Logits at one lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLogits {
    /// ASR logits, index 0 is the blank.
    pub asr: Vec<f64>,
    /// Speaker logits for ids `1..=N` (position 0 is speaker 1).
    pub speakers: Vec<f64>,
}

/// Anything that can score a (frame, history) lattice point.
pub trait JointScorer {
    fn frames(&self) -> usize;
    fn logits(&self, t: usize, history: &[usize]) -> Result<PointLogits>;
}

/// Model-backed scorer with both encoders evaluated once up front.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    f: Tensor2,
    f_aux: Tensor2,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, features: &Tensor2) -> Result<Self> {
        let (f, tap) = params.asr_encode(features)?;
        let f_aux = params.aux_encode(&tap)?;
        Ok(Self { params, f, f_aux })
    }
}

impl JointScorer for ModelScorer<'_> {
    fn frames(&self) -> usize {
        self.f.rows()
    }

    fn logits(&self, t: usize, history: &[usize]) -> Result<PointLogits> {
        let g = self.params.predict(history)?;
        let h = self.params.joint_hidden(self.f.row(t), &g, JointKind::Asr)?;
        let asr = self.params.asr_logits(&h)?;
        let h_aux = self.params.joint_hidden(self.f_aux.row(t), &g, JointKind::Aux)?;
        let speakers = self.params.aux_joint.output(&h_aux)?;
        Ok(PointLogits { asr, speakers })
    }
}

fn check_cap(max_emissions: usize) -> Result<()> {
    if max_emissions == 0 {
        return Err(Error::Domain("max_emissions_per_frame must be at least 1".into()));
    }
    Ok(())
}

/// Greedy HAT decoding: advance when `b > 0.5`, otherwise emit the argmax
/// wordpiece and attach the argmax speaker. After `max_emissions` emissions at
/// one frame, time advances regardless (still scored with the blank).
pub fn greedy_decode_with(scorer: &dyn JointScorer, max_emissions: usize) -> Result<DiarizedHypothesis> {
    check_cap(max_emissions)?;
    let mut hyp = DiarizedHypothesis::default();
    for t in 0..scorer.frames() {
        let mut emitted = 0;
        loop {
            let pt = scorer.logits(t, &hyp.wordpieces)?;
            let (lb, lnb, lsm) = hat_log_posterior(&pt.asr);
            // compared on accumulated scores so the beam search reproduces the
            // same choice under rounding
            let (advance, emit) = (hyp.score + lb, hyp.score + lnb);
            if advance > emit || emitted == max_emissions {
                hyp.score = advance;
                break;
            }
            let k = argmax(&lsm.iter().map(|l| emit + l).collect::<Vec<_>>());
            hyp.score = emit + lsm[k];
            hyp.push(k + 1, argmax(&pt.speakers) + 1, t);
            emitted += 1;
        }
    }
    Ok(hyp)
}

pub fn greedy_decode(params: &ModelParams, features: &Tensor2, max_emissions: usize) -> Result<DiarizedHypothesis> {
    greedy_decode_with(&ModelScorer::new(params, features)?, max_emissions)
}

#[derive(Debug, Clone)]
struct BeamHyp {
    hyp: DiarizedHypothesis,
    /// emissions at the current frame
    emitted: usize,
}

/// Inserts an advanced hypothesis, merging identical prefixes by `logaddexp`
/// and keeping the speakers and frames of the better path.
fn merge_into(next: &mut Vec<DiarizedHypothesis>, index: &mut HashMap<Vec<usize>, usize>, h: DiarizedHypothesis) {
    match index.get(&h.wordpieces) {
        Some(&i) => {
            let old = &mut next[i];
            let score = logaddexp(old.score, h.score);
            if h.score > old.score {
                *old = h;
            }
            old.score = score;
        }
        None => {
            index.insert(h.wordpieces.clone(), next.len());
            next.push(h);
        }
    }
}

enum Candidate {
    Advanced(usize),
    Emit { parent: usize, score: f64, pt: PointLogits },
}

/// Frame-synchronous beam search over the HAT distribution.
///
/// Each round first ranks "advance" and "emit something" candidates together
/// with the hypotheses already advanced to the next frame, keeping `beam_size`;
/// surviving emitters then expand into their best `beam_size` wordpieces. With
/// `beam_size == 1` this is exactly the greedy decoder. Scores use wordpiece
/// probabilities only.
pub fn beam_decode_with(
    scorer: &dyn JointScorer,
    beam_size: usize,
    max_emissions: usize,
) -> Result<Vec<DiarizedHypothesis>> {
    check_cap(max_emissions)?;
    if beam_size == 0 {
        return Err(Error::Domain("beam_size must be at least 1".into()));
    }
    let mut beam = vec![DiarizedHypothesis::default()];
    for t in 0..scorer.frames() {
        let mut active: Vec<BeamHyp> = beam.into_iter().map(|hyp| BeamHyp { hyp, emitted: 0 }).collect();
        let mut next: Vec<DiarizedHypothesis> = Vec::new();
        let mut index = HashMap::new();
        while !active.is_empty() {
            let mut emitters = Vec::new();
            for (i, a) in active.iter().enumerate() {
                let pt = scorer.logits(t, &a.hyp.wordpieces)?;
                let (lb, lnb, _) = hat_log_posterior(&pt.asr);
                let mut adv = a.hyp.clone();
                adv.score += lb;
                merge_into(&mut next, &mut index, adv);
                if a.emitted == max_emissions {
                    continue;
                }
                emitters.push(Candidate::Emit {
                    parent: i,
                    score: a.hyp.score + lnb,
                    pt,
                });
            }
            // emitters first so they win score ties, matching the greedy rule
            let mut pool: Vec<Candidate> = emitters;
            pool.extend((0..next.len()).map(Candidate::Advanced));
            let score_of = |c: &Candidate| match c {
                Candidate::Advanced(i) => next[*i].score,
                Candidate::Emit { score, .. } => *score,
            };
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| score_of(&pool[b]).total_cmp(&score_of(&pool[a])));
            order.truncate(beam_size);
            order.sort_unstable();

            let mut kept_next = Vec::new();
            let mut expansions: Vec<(f64, usize, usize, usize)> = Vec::new();
            let mut points = Vec::new();
            for (slot, cand) in pool.into_iter().enumerate() {
                match cand {
                    Candidate::Advanced(i) if order.binary_search(&slot).is_ok() => kept_next.push(i),
                    Candidate::Emit { parent, score, pt } if order.binary_search(&slot).is_ok() => {
                        let (_, _, lsm) = hat_log_posterior(&pt.asr);
                        let p = points.len();
                        for (k, l) in lsm.iter().enumerate() {
                            expansions.push((score + l, p, k, parent));
                        }
                        points.push(pt);
                    }
                    _ => {}
                }
            }
            let mut kept: Vec<DiarizedHypothesis> = Vec::with_capacity(kept_next.len());
            index.clear();
            for i in kept_next {
                index.insert(next[i].wordpieces.clone(), kept.len());
                kept.push(std::mem::take(&mut next[i]));
            }
            next = kept;

            expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
            expansions.truncate(beam_size);
            active = expansions
                .into_iter()
                .map(|(score, p, k, parent)| {
                    let mut hyp = active[parent].hyp.clone();
                    hyp.score = score;
                    hyp.push(k + 1, argmax(&points[p].speakers) + 1, t);
                    BeamHyp {
                        hyp,
                        emitted: active[parent].emitted + 1,
                    }
                })
                .collect();
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score));
        next.truncate(beam_size);
        beam = next;
    }
    beam.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(beam)
}

pub fn beam_decode(
    params: &ModelParams,
    features: &Tensor2,
    beam_size: usize,
    max_emissions: usize,
) -> Result<Vec<DiarizedHypothesis>> {
    beam_decode_with(&ModelScorer::new(params, features)?, beam_size, max_emissions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedWord {
    pub word: String,
    pub speaker: usize,
    pub frame: usize,
}

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub words: Vec<DecodedWord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub words: Vec<DecodedWord>,
    /// Words whose pieces disagree on the speaker.
    pub speaker_conflicts: usize,
}

/// Merges wordpieces into words. A piece starting with the word-boundary
/// marker opens a new word; the word takes the speaker and frame of its first
/// piece.
pub fn detokenize(hyp: &DiarizedHypothesis, vocab: &Vocab) -> Result<Transcript> {
    let mut out = Transcript::default();
    let mut conflict_open = false;
    for i in 0..hyp.len() {
        let piece = vocab.piece(hyp.wordpieces[i])?;
        let (starts, body) = match piece.strip_prefix(WORD_BOUNDARY) {
            Some(rest) => (true, rest),
            None => (out.words.is_empty(), piece),
        };
        if starts {
            conflict_open = false;
            out.words.push(DecodedWord {
                word: body.to_string(),
                speaker: hyp.speakers[i],
                frame: hyp.frames[i],
            });
        } else {
            let w = out.words.last_mut().expect("open word");
            w.word.push_str(body);
            if w.speaker != hyp.speakers[i] && !conflict_open {
                out.speaker_conflicts += 1;
                conflict_open = true;
            }
        }
    }
    Ok(out)
}
