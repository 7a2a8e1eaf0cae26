use proptest::prelude::*;
use weend::model::{aux_posterior, hat_posterior};
use weend::numerics::Tensor2;
use weend::transducer::{brute_force_loss, forward_backward, path_count, LogProbLattice};

/// A normalized lattice from free logits: at every point the blank and the
/// chosen label share mass with a fixed set of competing labels.
fn lattice_from(t: usize, u: usize, raw: &[f64]) -> LogProbLattice {
    let mut blank = Tensor2::zeros(t, u + 1);
    let mut label = Tensor2::zeros(t, u);
    for ti in 0..t {
        for ui in 0..=u {
            let k = (ti * (u + 1) + ui) * 3;
            let s = [raw[k], raw[k + 1], raw[k + 2], 0.0];
            let (b, p) = hat_posterior(&s).unwrap();
            blank.set(ti, ui, b.ln());
            if ui < u {
                label.set(ti, ui, p[0].ln());
            }
        }
    }
    LogProbLattice::new(blank, label).unwrap()
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_backward_agrees_with_enumeration(
        t in 1usize..=5,
        u in 0usize..=5,
        raw in prop::collection::vec(-4.0f64..4.0, 108),
    ) {
        let lat = lattice_from(t, u, &raw);
        let fb = forward_backward(&lat).unwrap();
        let brute = brute_force_loss(&lat).unwrap();
        prop_assert!((fb.loss - brute).abs() <= 1e-10 * brute.abs().max(1.0), "{} vs {}", fb.loss, brute);
    }

    #[test]
    fn alignment_count_is_binomial(t in 1u64..=6, u in 0u64..=6) {
        prop_assert_eq!(path_count(t as usize, u as usize).unwrap(), binomial(t - 1 + u, u));
    }

    #[test]
    fn hat_and_speaker_posteriors_are_normalized(
        s in prop::collection::vec(-30.0f64..30.0, 2..12),
        shift in -50.0f64..50.0,
    ) {
        let (b, p) = hat_posterior(&s).unwrap();
        prop_assert!((b + p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let spk = aux_posterior(&s);
        prop_assert!((spk.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = s.iter().enumerate().map(|(i, v)| if i == 0 { *v } else { v + shift }).collect();
        let moved = aux_posterior(&shifted);
        for (a, c) in spk.iter().zip(&moved) {
            prop_assert!((a - c).abs() <= 1e-9);
        }
    }
}

#[test]
fn two_frames_one_label_has_two_paths() {
    assert_eq!(path_count(2, 1).unwrap(), 2);
    let lat = lattice_from(2, 1, &[0.3; 18]);
    let fb = forward_backward(&lat).unwrap();
    assert!((fb.loss - brute_force_loss(&lat).unwrap()).abs() < 1e-12);
}
