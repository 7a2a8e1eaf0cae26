//! Word error rate with S/D/I breakdown, word diarization error rate, and the
//! overlap-excluding variant of the latter.

use serde::{Deserialize, Serialize};

use crate::datagen::TimedWord;
use crate::error::{Error, Result};

/// Case-folded with ASCII punctuation removed.
pub fn normalize_word(w: &str) -> String {
    w.chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

impl EditOp {
    pub fn ref_index(self) -> Option<usize> {
        match self {
            EditOp::Match { r, .. } | EditOp::Substitute { r, .. } | EditOp::Delete { r } => Some(r),
            EditOp::Insert { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
    pub ref_len: usize,
    pub hyp_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub c: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
}

impl Alignment {
    pub fn counts(&self) -> EditCounts {
        let mut k = EditCounts::default();
        for op in &self.ops {
            match op {
                EditOp::Match { .. } => k.c += 1,
                EditOp::Substitute { .. } => k.s += 1,
                EditOp::Delete { .. } => k.d += 1,
                EditOp::Insert { .. } => k.i += 1,
            }
        }
        k
    }

    pub fn distance(&self) -> usize {
        let k = self.counts();
        k.s + k.d + k.i
    }
}

/// Minimum edit distance alignment. The backtrace prefers match, then
/// substitution, then deletion, then insertion.
pub fn align<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Alignment {
    let r: Vec<String> = reference.iter().map(|w| normalize_word(w.as_ref())).collect();
    let h: Vec<String> = hypothesis.iter().map(|w| normalize_word(w.as_ref())).collect();
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(EditOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment {
        ops,
        ref_len: n,
        hyp_len: m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub wer: f64,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
}

impl WerReport {
    pub fn from_counts(ref_words: usize, s: usize, d: usize, i: usize) -> Result<Self> {
        if ref_words == 0 {
            return Err(Error::Domain("WER is undefined for an empty reference".into()));
        }
        let n = ref_words as f64;
        Ok(Self {
            ref_words,
            substitutions: s,
            deletions: d,
            insertions: i,
            wer: (s + d + i) as f64 / n,
            sub_rate: s as f64 / n,
            del_rate: d as f64 / n,
            ins_rate: i as f64 / n,
        })
    }
}

pub fn wer(alignment: &Alignment) -> Result<WerReport> {
    let k = alignment.counts();
    WerReport::from_counts(alignment.ref_len, k.s, k.d, k.i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMapping {
    /// Canonical ids compared directly.
    #[default]
    Identity,
    /// Best injective map from hypothesis ids to reference ids.
    BestPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WderReport {
    pub c: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    /// Correct words with the wrong speaker.
    pub c_is: usize,
    /// Substituted words with the wrong speaker.
    pub s_is: usize,
    /// `(S_IS + C_IS) / (S + C)`, zero when nothing is scored.
    pub wder: f64,
    /// Reference words excluded for overlapping another reference word.
    pub dropped_words: usize,
    pub dropped_word_fraction: f64,
}

impl WderReport {
    fn finish(mut self) -> Self {
        let den = self.s + self.c;
        self.wder = if den == 0 { 0.0 } else { (self.s_is + self.c_is) as f64 / den as f64 };
        self
    }

    /// Count-weighted aggregate of several reports.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a WderReport>) -> WderReport {
        let mut total = WderReport::default();
        let mut ref_words = 0.0;
        for r in reports {
            total.c += r.c;
            total.s += r.s;
            total.d += r.d;
            total.i += r.i;
            total.c_is += r.c_is;
            total.s_is += r.s_is;
            total.dropped_words += r.dropped_words;
            ref_words += (r.c + r.s + r.d + r.dropped_words) as f64;
        }
        total.dropped_word_fraction = if ref_words > 0.0 { total.dropped_words as f64 / ref_words } else { 0.0 };
        total.finish()
    }
}

fn check_lengths(alignment: &Alignment, ref_speakers: &[usize], hyp_speakers: &[usize]) -> Result<()> {
    if ref_speakers.len() != alignment.ref_len || hyp_speakers.len() != alignment.hyp_len {
        return Err(Error::Invalid(format!(
            "speaker sequences ({}, {}) do not match aligned word counts ({}, {})",
            ref_speakers.len(),
            hyp_speakers.len(),
            alignment.ref_len,
            alignment.hyp_len
        )));
    }
    Ok(())
}

fn scored_pairs(alignment: &Alignment, keep: impl Fn(usize) -> bool) -> Vec<(usize, usize, bool)> {
    alignment
        .ops
        .iter()
        .filter_map(|op| match *op {
            EditOp::Match { r, h } if keep(r) => Some((r, h, true)),
            EditOp::Substitute { r, h } if keep(r) => Some((r, h, false)),
            _ => None,
        })
        .collect()
}

/// Injective partial map hyp id -> ref id maximizing agreements, by
/// exhaustive search over the confusion matrix.
fn best_map(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut hyp_ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    hyp_ids.sort_unstable();
    hyp_ids.dedup();
    let mut ref_ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    ref_ids.sort_unstable();
    ref_ids.dedup();
    let mut conf = vec![vec![0usize; ref_ids.len()]; hyp_ids.len()];
    for &(r, h) in pairs {
        let hi = hyp_ids.binary_search(&h).expect("present");
        let ri = ref_ids.binary_search(&r).expect("present");
        conf[hi][ri] += 1;
    }

    struct Search<'a> {
        conf: &'a [Vec<usize>],
        used: Vec<bool>,
        current: Vec<Option<usize>>,
        best: (usize, Vec<Option<usize>>),
    }
    impl Search<'_> {
        fn run(&mut self, h: usize, score: usize) {
            if h == self.conf.len() {
                if score > self.best.0 || self.best.1.is_empty() {
                    self.best = (score, self.current.clone());
                }
                return;
            }
            for r in 0..self.used.len() {
                if !self.used[r] {
                    self.used[r] = true;
                    self.current.push(Some(r));
                    self.run(h + 1, score + self.conf[h][r]);
                    self.current.pop();
                    self.used[r] = false;
                }
            }
            self.current.push(None);
            self.run(h + 1, score);
            self.current.pop();
        }
    }
    let mut s = Search {
        conf: &conf,
        used: vec![false; ref_ids.len()],
        current: Vec::new(),
        best: (0, Vec::new()),
    };
    s.run(0, 0);
    s.best
        .1
        .iter()
        .enumerate()
        .filter_map(|(hi, r)| r.map(|ri| (hyp_ids[hi], ref_ids[ri])))
        .collect()
}

fn wder_filtered(
    alignment: &Alignment,
    ref_speakers: &[usize],
    hyp_speakers: &[usize],
    mapping: SpeakerMapping,
    keep: impl Fn(usize) -> bool,
) -> WderReport {
    let pairs = scored_pairs(alignment, &keep);
    let map: Option<Vec<(usize, usize)>> = match mapping {
        SpeakerMapping::Identity => None,
        SpeakerMapping::BestPermutation => Some(best_map(
            &pairs.iter().map(|&(r, h, _)| (ref_speakers[r], hyp_speakers[h])).collect::<Vec<_>>(),
        )),
    };
    let mut rep = WderReport::default();
    for &(r, h, is_match) in &pairs {
        let hs = hyp_speakers[h];
        let mapped = match &map {
            None => Some(hs),
            Some(m) => m.iter().find(|(from, _)| *from == hs).map(|(_, to)| *to),
        };
        let wrong = mapped != Some(ref_speakers[r]);
        if is_match {
            rep.c += 1;
            rep.c_is += usize::from(wrong);
        } else {
            rep.s += 1;
            rep.s_is += usize::from(wrong);
        }
    }
    for op in &alignment.ops {
        match *op {
            EditOp::Delete { r } if keep(r) => rep.d += 1,
            EditOp::Insert { .. } => rep.i += 1,
            _ => {}
        }
    }
    rep.finish()
}

pub fn wder(
    alignment: &Alignment,
    ref_speakers: &[usize],
    hyp_speakers: &[usize],
    mapping: SpeakerMapping,
) -> Result<WderReport> {
    check_lengths(alignment, ref_speakers, hyp_speakers)?;
    Ok(wder_filtered(alignment, ref_speakers, hyp_speakers, mapping, |_| true))
}

/// Reference words whose interval has a positive-length intersection with
/// any other reference word.
pub fn overlapping_words(words: &[TimedWord]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..words.len()).collect();
    idx.sort_by(|&a, &b| words[a].start.total_cmp(&words[b].start));
    let mut flagged = vec![false; words.len()];
    let mut max_end = f64::NEG_INFINITY;
    for (k, &i) in idx.iter().enumerate() {
        if max_end > words[i].start {
            flagged[i] = true;
        }
        if let Some(&next) = idx.get(k + 1) {
            if words[next].start < words[i].end {
                flagged[i] = true;
            }
        }
        max_end = max_end.max(words[i].end);
    }
    flagged
}

/// WDER that ignores every alignment op touching an overlapping reference word.
pub fn modified_wder(
    alignment: &Alignment,
    ref_words: &[TimedWord],
    ref_speakers: &[usize],
    hyp_speakers: &[usize],
    mapping: SpeakerMapping,
) -> Result<WderReport> {
    check_lengths(alignment, ref_speakers, hyp_speakers)?;
    if ref_words.len() != alignment.ref_len {
        return Err(Error::Invalid("reference words do not match the alignment".into()));
    }
    let flagged = overlapping_words(ref_words);
    let mut rep = wder_filtered(alignment, ref_speakers, hyp_speakers, mapping, |r| !flagged[r]);
    rep.dropped_words = flagged.iter().filter(|&&f| f).count();
    rep.dropped_word_fraction = if ref_words.is_empty() {
        0.0
    } else {
        rep.dropped_words as f64 / ref_words.len() as f64
    };
    Ok(rep)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Plain exponential recursion.
    fn edit_distance(r: &[&str], h: &[&str]) -> usize {
        match (r.split_first(), h.split_first()) {
            (None, _) => h.len(),
            (_, None) => r.len(),
            (Some((a, rr)), Some((b, hh))) => {
                let sub = edit_distance(rr, hh) + usize::from(normalize_word(a) != normalize_word(b));
                sub.min(edit_distance(rr, h) + 1).min(edit_distance(r, hh) + 1)
            }
        }
    }

    #[test]
    fn identical_and_deletion() {
        let a = align(&words("a b c"), &words("a b c"));
        assert_eq!(a.distance(), 0);
        assert!(a.ops.iter().all(|o| matches!(o, EditOp::Match { .. })));
        let a = align(&words("a b c"), &words("a c"));
        assert_eq!(a.counts(), EditCounts { c: 2, s: 0, d: 1, i: 0 });
        assert_eq!(a.ops[1], EditOp::Delete { r: 1 });
        assert_eq!(align(&words("Hello, World"), &words("hello world")).distance(), 0);
    }

    #[test]
    fn wer_arithmetic() {
        let r = WerReport::from_counts(10, 1, 1, 2).unwrap();
        assert!((r.wer - 0.4).abs() < 1e-12);
        assert_eq!((r.sub_rate, r.del_rate, r.ins_rate), (0.1, 0.1, 0.2));
        let a = align(&words("a b"), &words("x a y b z"));
        assert_eq!(wer(&a).unwrap().wer, 1.5);
        assert_eq!(wer(&align(&words("a b"), &words("a b"))).unwrap().wer, 0.0);
        assert!(wer(&align::<&str, &str>(&[], &["a"])).is_err());
    }

    #[test]
    fn wder_examples() {
        let a = align(&words("a b c d"), &words("a b c d"));
        let r = wder(&a, &[1, 1, 2, 2], &[1, 1, 2, 1], SpeakerMapping::Identity).unwrap();
        assert_eq!(r.wder, 0.25);
        let r = wder(&a, &[1, 1, 2, 3], &[3, 3, 1, 2], SpeakerMapping::BestPermutation).unwrap();
        assert_eq!(r.wder, 0.0);
        assert!(wder(&a, &[1, 1], &[1, 1, 1, 1], SpeakerMapping::Identity).is_err());
    }

    #[test]
    fn insertions_and_deletions_do_not_touch_wder() {
        let a = align(&words("a b c"), &words("a x c"));
        let base = wder(&a, &[1, 2, 1], &[1, 1, 2], SpeakerMapping::Identity).unwrap();
        let a2 = align(&words("a b c q"), &words("p a x c"));
        let r = wder(&a2, &[1, 2, 1, 2], &[2, 1, 1, 2], SpeakerMapping::Identity).unwrap();
        assert_eq!((r.c, r.s, r.d, r.i), (2, 1, 1, 1));
        assert_eq!((r.c_is + r.s_is, r.wder), (base.c_is + base.s_is, base.wder));
    }

    #[test]
    fn overlap_exclusion() {
        let t = |s: f64, e: f64| TimedWord::new("w", s, e, "x");
        let refs = [t(0.0, 1.0), t(1.0, 2.0), t(2.0, 3.0)];
        assert_eq!(overlapping_words(&refs), vec![false, false, false]);
        let a = align(&words("a b c"), &words("a b c"));
        let m = modified_wder(&a, &refs, &[1, 2, 1], &[1, 1, 1], SpeakerMapping::Identity).unwrap();
        assert_eq!(m, wder(&a, &[1, 2, 1], &[1, 1, 1], SpeakerMapping::Identity).unwrap());
        let refs = [t(0.0, 1.0), t(2.0, 3.0), t(2.0, 3.0), t(4.0, 5.0)];
        let a = align(&words("a b c d"), &words("a b c d"));
        let m = modified_wder(&a, &refs, &[1, 2, 1, 2], &[1, 1, 1, 1], SpeakerMapping::Identity).unwrap();
        assert_eq!((m.c, m.dropped_words, m.dropped_word_fraction), (2, 2, 0.5));
        assert_eq!(m.wder, 0.5);
        assert_eq!(overlapping_words(&[t(0.0, 5.0), t(1.0, 2.0), t(3.0, 4.0)]), vec![true, true, true]);
    }

    #[test]
    fn aggregate_is_count_weighted() {
        let a = WderReport { c: 3, c_is: 1, ..Default::default() }.finish();
        let b = WderReport { c: 1, s: 1, s_is: 1, ..Default::default() }.finish();
        let t = WderReport::aggregate([&a, &b]);
        assert_eq!(t.wder, 2.0 / 5.0);
        assert_eq!(mean_std(&[0.0, 0.2]), (0.1, 0.1));
    }

    fn arb_seq() -> impl Strategy<Value = Vec<&'static str>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "D"]), 0..=6)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn alignment_distance_matches_recursion(r in arb_seq(), h in arb_seq()) {
            let a = align(&r, &h);
            prop_assert_eq!(a.distance(), edit_distance(&r, &h));
            let mut seen_r = vec![0; r.len()];
            let mut seen_h = vec![0; h.len()];
            for op in &a.ops {
                match *op {
                    EditOp::Match { r, h } | EditOp::Substitute { r, h } => { seen_r[r] += 1; seen_h[h] += 1; }
                    EditOp::Delete { r } => seen_r[r] += 1,
                    EditOp::Insert { h } => seen_h[h] += 1,
                }
            }
            prop_assert!(seen_r.iter().chain(&seen_h).all(|&c| c == 1));
            let swapped = align(&h, &r);
            prop_assert_eq!(swapped.distance(), a.distance());
            let (k, ks) = (a.counts(), swapped.counts());
            prop_assert_eq!(k.s + k.d + k.i, ks.s + ks.i + ks.d);
        }

        #[test]
        fn best_permutation_is_exhaustive_minimum(
            pairs in prop::collection::vec((1usize..=4, 1usize..=4), 1..12)
        ) {
            let refs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let hyps: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let text: Vec<&str> = vec!["w"; pairs.len()];
            let a = align(&text, &text);
            let best = wder(&a, &refs, &hyps, SpeakerMapping::BestPermutation).unwrap();
            let brute = permutations(4)
                .into_iter()
                .map(|p| {
                    let mapped: Vec<usize> = hyps.iter().map(|&h| p[h - 1] + 1).collect();
                    wder(&a, &refs, &mapped, SpeakerMapping::Identity).unwrap().wder
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert!((best.wder - brute).abs() < 1e-12, "{} vs {}", best.wder, brute);
            // consistent relabeling of hypothesis ids leaves it unchanged
            let relabeled: Vec<usize> = hyps.iter().map(|h| 5 - h).collect();
            prop_assert_eq!(wder(&a, &refs, &relabeled, SpeakerMapping::BestPermutation).unwrap().wder, best.wder);
        }
    }
}
