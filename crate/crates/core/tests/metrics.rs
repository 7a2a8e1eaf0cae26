use proptest::prelude::*;
use weend::datagen::TimedWord;
use weend::metrics::{align, modified_wder, wder, EditOp, SpeakerMapping};

fn slow_distance(r: &[u8], h: &[u8]) -> usize {
    match (r.split_last(), h.split_last()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => (slow_distance(rr, hh) + usize::from(a != b))
            .min(slow_distance(rr, h) + 1)
            .min(slow_distance(r, hh) + 1),
    }
}

fn words(ids: &[u8]) -> Vec<String> {
    ids.iter().map(|i| format!("w{i}")).collect()
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
    fn alignment_is_a_minimal_edit_script(r in prop::collection::vec(0u8..4, 0..=6), h in prop::collection::vec(0u8..4, 0..=6)) {
        let al = align(&words(&r), &words(&h));
        prop_assert_eq!(al.distance(), slow_distance(&r, &h));
        let k = al.counts();
        prop_assert_eq!(k.c + k.s + k.d, r.len());
        prop_assert_eq!(k.c + k.s + k.i, h.len());
    }

    #[test]
    fn best_permutation_is_the_exhaustive_minimum(
        n in 1usize..=4,
        r in prop::collection::vec(0u8..3, 1..8),
        h in prop::collection::vec(0u8..3, 1..8),
        seed_spk in prop::collection::vec(0usize..4, 16),
    ) {
        let al = align(&words(&r), &words(&h));
        let rs: Vec<usize> = (0..r.len()).map(|i| seed_spk[i] % n + 1).collect();
        let hs: Vec<usize> = (0..h.len()).map(|i| seed_spk[15 - i] % n + 1).collect();
        let best = wder(&al, &rs, &hs, SpeakerMapping::BestPermutation).unwrap().wder;
        let exhaustive = permutations(n)
            .into_iter()
            .map(|p| {
                let mapped: Vec<usize> = hs.iter().map(|&s| p[s - 1] + 1).collect();
                wder(&al, &rs, &mapped, SpeakerMapping::Identity).unwrap().wder
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!((best - exhaustive).abs() < 1e-12, "{} vs {}", best, exhaustive);
        prop_assert!(best <= wder(&al, &rs, &hs, SpeakerMapping::Identity).unwrap().wder + 1e-12);
    }

    #[test]
    fn modified_wder_equals_wder_without_overlap(
        spk in prop::collection::vec(1usize..=3, 1..10),
        hyp_spk in prop::collection::vec(1usize..=3, 10),
        drop in 0usize..3,
    ) {
        let refs: Vec<TimedWord> = spk.iter().enumerate()
            .map(|(i, &s)| TimedWord::new(format!("w{i}"), i as f64, i as f64 + 0.9, s.to_string()))
            .collect();
        let r: Vec<&str> = refs.iter().map(|w| w.text.as_str()).collect();
        let h: Vec<&str> = r.iter().skip(drop.min(r.len() - 1)).copied().collect();
        let hs = &hyp_spk[..h.len()];
        let al = align(&r, &h);
        for m in [SpeakerMapping::Identity, SpeakerMapping::BestPermutation] {
            let a = wder(&al, &spk, hs, m).unwrap();
            let b = modified_wder(&al, &refs, &spk, hs, m).unwrap();
            prop_assert_eq!(b.dropped_words, 0);
            prop_assert_eq!(a.wder, b.wder);
        }
    }
}

#[test]
fn one_wrong_speaker_in_four_matches() {
    let r = ["a", "b", "c", "d"];
    let al = align(&r, &r);
    assert!(al.ops.iter().all(|op| matches!(op, EditOp::Match { .. })));
    let rep = wder(&al, &[1, 1, 2, 2], &[1, 1, 2, 1], SpeakerMapping::Identity).unwrap();
    assert_eq!(rep.wder, 0.25);
}
