//! Turn-based baseline orchestration: each recognized word takes the speaker of
//! the diarization segment it overlaps most.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::datagen::{canonicalize_speakers, TimedWord};
use crate::decode::{DecodeRecord, DecodedWord};
use crate::error::{Error, Result};
use crate::formats::{CtmWord, RttmSegment};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// Raw segment speaker name per word.
    pub speakers: Vec<String>,
    /// Words that overlapped no segment and fell back to the nearest one.
    pub fallbacks: usize,
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Ranks segments for one word: larger key first, then earlier start, then
/// lexicographic speaker name.
fn better(key_a: f64, a: &RttmSegment, key_b: f64, b: &RttmSegment) -> bool {
    match key_a.total_cmp(&key_b) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.start.total_cmp(&b.start).then_with(|| a.speaker.cmp(&b.speaker)) == Ordering::Less,
    }
}

/// Speaker of maximum duration overlap for each `(start, end)` word interval.
/// A word touching no segment takes the segment with the nearest midpoint.
pub fn assign_speakers_by_overlap(words: &[(f64, f64)], segments: &[RttmSegment]) -> Result<Assignment> {
    if segments.is_empty() {
        return Err(Error::Invalid("cannot assign speakers from an empty segment set".into()));
    }
    let mut out = Assignment::default();
    for &(ws, we) in words {
        let mut best: Option<(f64, &RttmSegment)> = None;
        for seg in segments {
            let o = overlap((ws, we), (seg.start, seg.end()));
            if o > 0.0 && best.is_none_or(|(k, b)| better(o, seg, k, b)) {
                best = Some((o, seg));
            }
        }
        let seg = match best {
            Some((_, s)) => s,
            None => {
                out.fallbacks += 1;
                let mid = (ws + we) / 2.0;
                let mut near: Option<(f64, &RttmSegment)> = None;
                for seg in segments {
                    let d = -((seg.start + seg.end()) / 2.0 - mid).abs();
                    if near.is_none_or(|(k, b)| better(d, seg, k, b)) {
                        near = Some((d, seg));
                    }
                }
                near.expect("non-empty").1
            }
        };
        out.speakers.push(seg.speaker.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrchestrationStats {
    pub files: usize,
    pub words: usize,
    pub fallbacks: usize,
}

/// Diarized transcripts in the decode-output schema, one record per CTM file,
/// with speakers renumbered first-come-first-serve.
pub fn orchestrate(
    ctm: &[CtmWord],
    segments: &[RttmSegment],
    frame_step: f64,
) -> Result<(Vec<DecodeRecord>, OrchestrationStats)> {
    if !(frame_step > 0.0) {
        return Err(Error::Domain("frame_step must be positive".into()));
    }
    let mut by_file: BTreeMap<&str, Vec<&CtmWord>> = BTreeMap::new();
    for w in ctm {
        by_file.entry(w.file_id.as_str()).or_default().push(w);
    }
    let mut seg_by_file: BTreeMap<&str, Vec<RttmSegment>> = BTreeMap::new();
    for s in segments {
        seg_by_file.entry(s.file_id.as_str()).or_default().push(s.clone());
    }
    let missing: Vec<&str> = by_file.keys().filter(|f| !seg_by_file.contains_key(*f)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("no RTTM segments for files {missing:?}")));
    }
    let mut stats = OrchestrationStats::default();
    let mut records = Vec::with_capacity(by_file.len());
    for (file, mut words) in by_file {
        words.sort_by(|a, b| a.start.total_cmp(&b.start));
        let intervals: Vec<(f64, f64)> = words.iter().map(|w| (w.start, w.end())).collect();
        let a = assign_speakers_by_overlap(&intervals, &seg_by_file[file])?;
        let timed: Vec<TimedWord> = words
            .iter()
            .zip(&a.speakers)
            .map(|(w, s)| TimedWord::new(w.word.clone(), w.start, w.end(), s.clone()))
            .collect();
        let (_, ids) = canonicalize_speakers(&timed, usize::MAX)?;
        stats.files += 1;
        stats.words += words.len();
        stats.fallbacks += a.fallbacks;
        records.push(DecodeRecord {
            id: file.to_string(),
            words: words
                .iter()
                .zip(ids)
                .map(|(w, speaker)| DecodedWord {
                    word: w.word.clone(),
                    speaker,
                    frame: (w.start / frame_step + 1e-9).floor() as usize,
                })
                .collect(),
        });
    }
    Ok((records, stats))
}
