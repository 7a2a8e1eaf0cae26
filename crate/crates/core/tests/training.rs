use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weend::decode::{beam_decode, greedy_decode};
use weend::model::{aux_posterior, JointKind, ModelConfig, ModelParams};
use weend::numerics::Tensor2;
use weend::train::{train, Example, Phase, TrainConfig};

fn tiny_config(max_speakers: usize) -> ModelConfig {
    ModelConfig {
        d_features: 4,
        d_a: 6,
        d_l: 5,
        d_h: 6,
        d_aux: 5,
        d_h_aux: 6,
        vocab_size: 5,
        max_speakers,
        asr_layers: 3,
        tap_layer: 2,
        aux_layers: 1,
        predictor_context: 2,
    }
}

fn examples(rng: &mut ChaCha8Rng, n: usize, speakers: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let u = rng.random_range(1..4);
            Example {
                id: format!("e{i}"),
                features: Tensor2::uniform(rng.random_range(3..7), 4, -1.0, 1.0, rng),
                wordpieces: (0..u).map(|_| rng.random_range(1..5)).collect(),
                speakers: (0..u).map(|_| rng.random_range(1..=speakers)).collect(),
            }
        })
        .collect()
}

fn asr_bits(p: &ModelParams) -> Vec<u64> {
    p.flat_values(|g| g.is_asr()).into_iter().map(f64::to_bits).collect()
}

#[test]
fn single_speaker_data_drives_speaker_one_posterior_to_certainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ModelParams::init(&tiny_config(2), &mut rng).unwrap();
    let data = examples(&mut rng, 6, 1);
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 6,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let asr_before = asr_bits(&params);
    let stats = train(&mut params, &data, &cfg, Phase::Aux, |_, _| {}).unwrap();
    assert!(stats.final_loss().unwrap() < stats.losses[0]);
    assert_eq!(asr_bits(&params), asr_before);
    for ex in &data {
        let (f, tap) = params.asr_encode(&ex.features).unwrap();
        let f_aux = params.aux_encode(&tap).unwrap();
        let (g, _) = params.predictor_outputs(&ex.wordpieces).unwrap();
        for t in 0..f.rows() {
            for u in 0..ex.wordpieces.len() {
                let h = params.joint_hidden(f.row(t), g.row(u), JointKind::Asr).unwrap();
                let s_blank = params.asr_logits(&h).unwrap()[0];
                let h_aux = params.joint_hidden(f_aux.row(t), g.row(u), JointKind::Aux).unwrap();
                let p = aux_posterior(&params.aux_logits(&h_aux, s_blank).unwrap());
                assert!(p[0] > 0.99, "{} at ({t},{u})", p[0]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn aux_training_never_moves_the_asr(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&tiny_config(3), &mut rng).unwrap();
        let data = examples(&mut rng, 4, 3);
        let before = asr_bits(&params);
        let aux_before = params.flat_values(|g| !g.is_asr());
        let cfg = TrainConfig { steps, batch_size: 2, learning_rate: 0.01, seed, ..TrainConfig::default() };
        train(&mut params, &data, &cfg, Phase::Aux, |_, _| {}).unwrap();
        prop_assert_eq!(asr_bits(&params), before);
        prop_assert_ne!(params.flat_values(|g| !g.is_asr()), aux_before);
    }

    #[test]
    fn decoders_emit_one_speaker_per_wordpiece(seed in any::<u64>(), frames in 1usize..12, scale in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&tiny_config(3), &mut rng).unwrap();
        for (_, _, p) in params.named_params_mut() {
            for v in p.value.data_mut() {
                *v *= scale * 10.0;
            }
        }
        let x = Tensor2::uniform(frames, 4, -2.0, 2.0, &mut rng);
        let greedy = greedy_decode(&params, &x, 4).unwrap();
        prop_assert_eq!(greedy.wordpieces.len(), greedy.speakers.len());
        prop_assert!(greedy.speakers.iter().all(|&s| (1..=3).contains(&s)));
        let beam1 = beam_decode(&params, &x, 1, 4).unwrap();
        prop_assert_eq!(&beam1[0].wordpieces, &greedy.wordpieces);
        prop_assert_eq!(&beam1[0].speakers, &greedy.speakers);
        prop_assert_eq!(beam1[0].score.to_bits(), greedy.score.to_bits());
        for h in beam_decode(&params, &x, 3, 4).unwrap() {
            prop_assert_eq!(h.wordpieces.len(), h.speakers.len());
        }
    }

    #[test]
    fn aux_encoder_is_causal(seed in any::<u64>(), frames in 2usize..10, cut in 1usize..10) {
        let cut = cut.min(frames);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&tiny_config(2), &mut rng).unwrap();
        let x = Tensor2::uniform(frames, 4, -1.0, 1.0, &mut rng);
        let (_, tap) = params.asr_encode(&x).unwrap();
        let full = params.aux_encode(&tap).unwrap();
        let mut prefix = Tensor2::zeros(cut, tap.cols());
        for r in 0..cut {
            prefix.row_mut(r).copy_from_slice(tap.row(r));
        }
        let part = params.aux_encode(&prefix).unwrap();
        prop_assert_eq!(full.rows(), frames);
        for r in 0..cut {
            prop_assert_eq!(part.row(r), full.row(r));
        }
    }
}
