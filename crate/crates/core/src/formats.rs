//! RTTM and CTM text formats, the JSON-lines manifest and raw feature files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::assign_speakers_by_overlap;
use crate::datagen::{canonicalize_speakers, Conversation, TimedWord};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttmSegment {
    pub file_id: String,
    pub channel: String,
    pub start: f64,
    pub duration: f64,
    pub speaker: String,
}

impl RttmSegment {
    pub fn new(file_id: &str, start: f64, duration: f64, speaker: &str) -> Self {
        Self {
            file_id: file_id.into(),
            channel: "1".into(),
            start,
            duration,
            speaker: speaker.into(),
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmWord {
    pub file_id: String,
    pub channel: String,
    pub start: f64,
    pub duration: f64,
    pub word: String,
    pub confidence: Option<f64>,
}

impl CtmWord {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

fn parse_time(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} {field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} is not finite"),
        });
    }
    Ok(v)
}

fn check_interval(start: f64, duration: f64, line: usize) -> Result<()> {
    if start < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("negative start time {start}"),
        });
    }
    if duration <= 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("non-positive duration {duration}"),
        });
    }
    Ok(())
}

/// `SPEAKER <file> <chan> <tbeg> <tdur> <NA> <NA> <name> <NA> <NA>`; other
/// record types are skipped.
pub fn parse_rttm(text: &str) -> Result<Vec<RttmSegment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        match f.first() {
            None => continue,
            Some(&"SPEAKER") => {}
            Some(_) => continue,
        }
        if f.len() != 10 {
            return Err(Error::Parse {
                line,
                message: format!("SPEAKER record has {} fields, expected 10", f.len()),
            });
        }
        let start = parse_time(f[3], "start", line)?;
        let duration = parse_time(f[4], "duration", line)?;
        check_interval(start, duration, line)?;
        out.push(RttmSegment {
            file_id: f[1].into(),
            channel: f[2].into(),
            start,
            duration,
            speaker: f[7].into(),
        });
    }
    Ok(out)
}

pub fn write_rttm(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        s.push_str(&format!(
            "SPEAKER {} {} {:.3} {:.3} <NA> <NA> {} <NA> <NA>\n",
            seg.file_id, seg.channel, seg.start, seg.duration, seg.speaker
        ));
    }
    s
}

/// `<file> <chan> <tbeg> <tdur> <word> [conf]`, returned sorted by file then start.
pub fn parse_ctm(text: &str) -> Result<Vec<CtmWord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with(";;") {
            continue;
        }
        if f.len() != 5 && f.len() != 6 {
            return Err(Error::Parse {
                line,
                message: format!("CTM record has {} fields, expected 5 or 6", f.len()),
            });
        }
        let start = parse_time(f[2], "start", line)?;
        let duration = parse_time(f[3], "duration", line)?;
        check_interval(start, duration, line)?;
        let confidence = f.get(5).map(|c| parse_time(c, "confidence", line)).transpose()?;
        out.push(CtmWord {
            file_id: f[0].into(),
            channel: f[1].into(),
            start,
            duration,
            word: f[4].into(),
            confidence,
        });
    }
    sort_ctm(&mut out);
    Ok(out)
}

pub fn sort_ctm(words: &mut [CtmWord]) {
    words.sort_by(|a, b| a.file_id.cmp(&b.file_id).then(a.start.total_cmp(&b.start)));
}

pub fn write_ctm(words: &[CtmWord]) -> String {
    let mut sorted = words.to_vec();
    sort_ctm(&mut sorted);
    let mut s = String::new();
    for w in &sorted {
        s.push_str(&format!("{} {} {:.3} {:.3} {}", w.file_id, w.channel, w.start, w.duration, w.word));
        if let Some(c) = w.confidence {
            s.push_str(&format!(" {c:.3}"));
        }
        s.push('\n');
    }
    s
}

/// Words with `raw_speaker` taken from the segment of maximum overlap.
pub fn rttm_words_to_targets(segments: &[RttmSegment], words: &[CtmWord]) -> Result<Vec<TimedWord>> {
    if words.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(w) = words.iter().find(|w| segments.iter().all(|s| s.file_id != w.file_id)) {
        return Err(Error::Invalid(format!("no RTTM segments for file {}", w.file_id)));
    }
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        let segs: Vec<RttmSegment> = segments.iter().filter(|s| s.file_id == w.file_id).cloned().collect();
        let a = assign_speakers_by_overlap(&[(w.start, w.end())], &segs)?;
        out.push(TimedWord::new(w.word.clone(), w.start, w.end(), a.speakers[0].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestWord {
    pub text: String,
    pub start: f64,
    pub end: f64,
    pub speaker_raw: String,
    pub speaker_id: usize,
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub features: String,
    pub frames: usize,
    pub words: Vec<ManifestWord>,
}

impl ManifestEntry {
    pub fn from_conversation(conv: &Conversation, features: impl Into<String>, max_speakers: usize) -> Result<Self> {
        let (_, ids) = canonicalize_speakers(&conv.words, max_speakers)?;
        Ok(Self {
            id: conv.id.clone(),
            features: features.into(),
            frames: conv.features.rows(),
            words: conv
                .words
                .iter()
                .zip(ids)
                .map(|(w, id)| ManifestWord {
                    text: w.text.clone(),
                    start: w.start,
                    end: w.end,
                    speaker_raw: w.raw_speaker.clone(),
                    speaker_id: id,
                })
                .collect(),
        })
    }

    pub fn timed_words(&self) -> Vec<TimedWord> {
        self.words
            .iter()
            .map(|w| TimedWord::new(w.text.clone(), w.start, w.end, w.speaker_raw.clone()))
            .collect()
    }

    pub fn speaker_ids(&self) -> Vec<usize> {
        self.words.iter().map(|w| w.speaker_id).collect()
    }

    pub fn distinct_speakers(&self) -> usize {
        self.words.iter().map(|w| w.speaker_id).max().unwrap_or(0)
    }
}

/// Serializes any records as JSON lines.
pub fn write_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// 16-byte header (rows, cols as u64 LE) followed by row-major f64 LE.
pub fn write_features<W: Write>(m: &Tensor2, mut w: W) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Tensor2> {
    let mut h = [0u8; 8];
    r.read_exact(&mut h)?;
    let rows = u64::from_le_bytes(h) as usize;
    r.read_exact(&mut h)?;
    let cols = u64::from_le_bytes(h) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "feature file holds {} bytes, header implies {rows}x{cols}",
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor2::new(rows, cols, data)
}

pub fn save_features(m: &Tensor2, path: &Path) -> Result<()> {
    write_features(m, BufWriter::new(File::create(path)?))
}

pub fn load_features(path: &Path) -> Result<Tensor2> {
    read_features(BufReader::new(File::open(path)?))
}
