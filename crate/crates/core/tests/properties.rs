use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bwn::binarize::{binarize_filter, brute_force_optimum, objective_j, BinaryFilterBank};
use bwn::metrics::{compute_eer, compute_min_dcf};
use bwn::model_io::{decode_model, encode_model, pack_weights, size_report, unpack_weights, ModelEncoding};
use bwn::nn::{build_micro_resnet, Activation, Mode, Params, SlotKind};
use bwn::synth::{generate_corpus, labeled_set, SyntheticSpeakerConfig};
use bwn::tensor::Tensor;
use bwn::train::{accuracy, ste_gradient, train, TrainConfig, TrainState};
use bwn::verify::{data_suite, random_model};

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let v = prop::collection::vec(-20i32..20, 1..30);
    (v.clone(), v).prop_map(|(t, n)| {
        (
            t.into_iter().map(|x| x as f64 / 4.0 + 0.5).collect(),
            n.into_iter().map(|x| x as f64 / 4.0).collect(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_is_never_beaten(w in prop::collection::vec(-3.0f64..3.0, 1..11)) {
        let fb = binarize_filter(&w).unwrap();
        let j = objective_j(&w, &fb.signs, fb.scale).unwrap();
        let best = brute_force_optimum(&w).unwrap();
        prop_assert!(j <= best.objective + 1e-9);
        prop_assert!(fb.scale >= 0.0);
    }

    #[test]
    fn ste_passes_exactly_inside_the_clip_region(r in -3.0f64..3.0, g in -5.0f64..5.0, t in 0.1f64..2.0) {
        let out = ste_gradient(&Tensor::full(&[1], g), &Tensor::full(&[1], r), t).unwrap();
        prop_assert_eq!(out.data()[0], if r.abs() <= t { g } else { 0.0 });
    }

    #[test]
    fn eer_ignores_monotone_transforms((t, n) in scores(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        let (e0, _) = compute_eer(&t, &n).unwrap();
        let f = |v: &f64| k * v + c;
        let (e1, _) = compute_eer(&t.iter().map(f).collect::<Vec<_>>(), &n.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((e0 - e1).abs() < 1e-12);
    }

    #[test]
    fn eer_is_symmetric_under_label_swap((t, n) in scores()) {
        let (e0, _) = compute_eer(&t, &n).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let (e1, _) = compute_eer(&neg(&n), &neg(&t)).unwrap();
        prop_assert!((e0 - e1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&e0));
    }

    #[test]
    fn min_dcf_never_exceeds_a_trivial_system((t, n) in scores(), p in 0.001f64..0.999) {
        let (d, _) = compute_min_dcf(&t, &n, p, 1.0, 1.0).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn pack_round_trips(f in 1usize..5, n in 1usize..150, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_vec(&[f, n, 1, 1], (0..f * n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let bank = BinaryFilterBank::from_weights(&w).unwrap();
        let bytes = pack_weights(&bank);
        prop_assert_eq!(bytes.len(), f * n.div_ceil(64) * 8);
        prop_assert_eq!(unpack_weights(&bytes, n, f, true).unwrap(), bank.words().to_vec());
    }

    #[test]
    fn models_round_trip_and_ratio_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, params) = random_model(&mut rng).unwrap();
        for enc in [ModelEncoding::Checkpoint, ModelEncoding::Packed] {
            let bytes = encode_model(&spec, &params, enc).unwrap();
            let (spec2, loaded) = decode_model(&bytes).unwrap().into_model().unwrap();
            prop_assert_eq!(&spec2, &spec);
            prop_assert_eq!(encode_model(&spec2, &loaded, enc).unwrap(), bytes);
        }
        let r = size_report(&spec);
        prop_assert_eq!(r.sign_bit_ratio(), 32.0);
        prop_assert!(r.ratio() >= 1.0 && r.ratio() <= 32.0);
        prop_assert!(r.file_ratio() >= 1.0);
    }

    #[test]
    fn trial_lists_are_balanced(speakers in 2usize..7, utts in 2usize..9, seed in any::<u64>()) {
        let cfg = SyntheticSpeakerConfig {
            num_speakers: speakers,
            utterances_per_speaker: utts,
            height: 4,
            width: 4,
            seed,
            ..SyntheticSpeakerConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let (t, n) = corpus.trials.counts();
        prop_assert!(t > 0);
        prop_assert!(t.abs_diff(n) <= 1);
        prop_assert_eq!(corpus, generate_corpus(&cfg).unwrap());
    }
}

#[test]
fn data_oracles_hold() {
    for c in data_suite().unwrap() {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn zero_noise_utterances_are_identical() {
    let cfg = SyntheticSpeakerConfig {
        sigma_within: 0.0,
        num_speakers: 3,
        utterances_per_speaker: 4,
        ..SyntheticSpeakerConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let all: Vec<_> = corpus.train.iter().chain(&corpus.held_out).collect();
    for a in &all {
        for b in &all {
            if a.speaker == b.speaker {
                assert_eq!(a.features, b.features);
            }
        }
    }
}

#[test]
fn training_lowers_loss_and_keeps_real_valued_shadows() {
    let data_cfg = SyntheticSpeakerConfig {
        num_speakers: 4,
        utterances_per_speaker: 12,
        height: 12,
        width: 12,
        sigma_within: 0.3,
        separation: 1.5,
        seed: 4,
        ..SyntheticSpeakerConfig::default()
    };
    let corpus = generate_corpus(&data_cfg).unwrap();
    let data = labeled_set(&corpus.train).unwrap();
    let spec = build_micro_resnet([1, 12, 12], 1, &[4, 8], 16, 4, Activation::Relu).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&spec, Params::init(&spec, 9), &cfg, 9).unwrap();
    let history = train(&mut state, &spec, &data, &cfg, |_| {}).unwrap();
    assert_eq!(history.len(), 10);
    assert!(history[9].loss < history[0].loss, "{history:?}");
    assert!(accuracy(&spec, &state.params, &data, Mode::FullPrecision).unwrap() > 0.25);

    for (i, slot) in spec.slots().iter().enumerate() {
        if slot.kind != SlotKind::BinaryConv {
            continue;
        }
        let w = state.params.dense(i).unwrap();
        let n = w.numel() / slot.shape[0];
        for filter in w.data().chunks(n) {
            let mut mags: Vec<u32> = filter.iter().map(|v| v.abs().to_bits()).collect();
            mags.sort_unstable();
            mags.dedup();
            assert!(mags.len() > 2, "shadow filter collapsed to {} magnitudes", mags.len());
        }
    }
}
