use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stq_core::format;
use stq_core::inference::InferenceModel;
use stq_core::nn::{self, Model, QuantMode, ScaleScope};
use stq_core::quant::{self, Depth, QuantDepth, TernaryCode};
use stq_core::regularizer::{self, RegularizerConfig, BETA_MAX, BETA_MIN};
use stq_core::report::Histogram;
use stq_core::trainer::{self, TrainConfig};
use stq_core::Tensor;

fn codes(depth: QuantDepth) -> impl Strategy<Value = Vec<i8>> {
    let elem = match depth {
        QuantDepth::Binary => prop_oneof![Just(-1i8), Just(1i8)].boxed(),
        QuantDepth::Ternary => (-1i8..=1).boxed(),
    };
    prop::collection::vec(elem, 0..300)
}

fn encoded_lenet() -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model: Model<f32> = Model::new(&nn::build_lenet5(), QuantMode::Stq, ScaleScope::PerFilter, &mut rng).unwrap();
    let depths = vec![Depth::Binary, Depth::Ternary, Depth::Binary, Depth::Ternary, Depth::Ternary];
    format::encode(&InferenceModel::from_model(&model, &depths).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corrupted_model_files_never_panic(edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
        let mut bytes = encoded_lenet();
        for (at, v) in edits {
            let i = at.index(bytes.len());
            bytes[i] = v;
        }
        let _ = format::decode(&bytes);
    }

    #[test]
    fn every_truncation_is_rejected(at in any::<prop::sample::Index>()) {
        let bytes = encoded_lenet();
        let cut = at.index(bytes.len());
        prop_assert!(format::decode(&bytes[..cut]).is_err());
    }
}

proptest! {
    #[test]
    fn binary_pack_round_trip(c in codes(QuantDepth::Binary)) {
        let code = TernaryCode::new(c).unwrap();
        let packed = quant::pack_codes(&code, QuantDepth::Binary).unwrap();
        prop_assert_eq!(packed.len(), quant::packed_len(code.len(), QuantDepth::Binary));
        prop_assert_eq!(quant::unpack_codes(&packed, code.len(), QuantDepth::Binary).unwrap(), code);
    }

    #[test]
    fn ternary_pack_round_trip(c in codes(QuantDepth::Ternary)) {
        let code = TernaryCode::new(c).unwrap();
        let packed = quant::pack_codes(&code, QuantDepth::Ternary).unwrap();
        prop_assert_eq!(quant::unpack_codes(&packed, code.len(), QuantDepth::Ternary).unwrap(), code);
    }

    #[test]
    fn packed_padding_is_zero(c in codes(QuantDepth::Ternary)) {
        let code = TernaryCode::new(c).unwrap();
        let packed = quant::pack_codes(&code, QuantDepth::Ternary).unwrap();
        let used = 2 * code.len();
        if !used.is_multiple_of(8) {
            prop_assert_eq!(packed.last().unwrap() >> (used % 8), 0);
        }
    }

    #[test]
    fn penalty_even_nonnegative_and_bounded(w in -5.0f64..5.0, mu in 0.0f64..3.0, beta in BETA_MIN..BETA_MAX) {
        let r = regularizer::reg_stq(w, mu, beta).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert_eq!(r, regularizer::reg_stq(-w, mu, beta).unwrap());
        prop_assert!(r <= regularizer::reg_r1(w, mu));
        prop_assert!(r <= beta.tan() * w.abs());
    }

    #[test]
    fn penalty_vanishes_on_the_quantization_levels(mu in 0.0f64..3.0, beta in BETA_MIN..BETA_MAX) {
        prop_assert_eq!(regularizer::reg_stq(0.0, mu, beta).unwrap(), 0.0);
        prop_assert_eq!(regularizer::reg_stq(mu, mu, beta).unwrap(), 0.0);
        prop_assert_eq!(regularizer::reg_stq(-mu, mu, beta).unwrap(), 0.0);
    }

    #[test]
    fn layer_value_matches_gradient_pass(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        mu in prop::collection::vec(0.01f64..2.0, 3),
        beta in BETA_MIN..BETA_MAX,
        gamma in 0.0f64..0.1,
    ) {
        let t = Tensor::new(vec![3, 4], w).unwrap();
        let cfg = RegularizerConfig { gamma, ..Default::default() };
        let v = regularizer::reg_layer(&t, &mu, beta, &cfg).unwrap();
        let g = regularizer::reg_layer_grad(&t, &mu, beta, &cfg).unwrap();
        prop_assert!((v - g.value).abs() <= 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn ternarization_threshold(w in prop::collection::vec(-2.0f32..2.0, 1..64), delta in 0.0f32..1.0) {
        let t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let c = quant::threshold_ternarize(&t, delta).unwrap();
        for (x, code) in w.iter().zip(c.as_slice()) {
            let want = if x.abs() <= delta { 0 } else if *x > 0.0 { 1 } else { -1 };
            prop_assert_eq!(*code, want);
        }
    }

    #[test]
    fn compression_ratio_between_depth_bounds(
        layers in prop::collection::vec((1usize..100_000, prop::bool::ANY), 1..8)
    ) {
        let counts: Vec<usize> = layers.iter().map(|l| l.0).collect();
        let depths: Vec<Depth> = layers.iter().map(|l| if l.1 { Depth::Binary } else { Depth::Ternary }).collect();
        let r = trainer::compression_ratio(&counts, &depths).unwrap();
        prop_assert!((16.0..=32.0).contains(&r));
    }

    #[test]
    fn learning_rate_never_increases(drops in prop::collection::vec(0usize..50, 0..4), factor in 1.0f64..20.0) {
        let cfg = TrainConfig { lr_drop_epochs: drops, lr_drop_factor: factor, ..Default::default() };
        for e in 1..60 {
            prop_assert!(cfg.lr_at(e) <= cfg.lr_at(e - 1));
        }
    }

    #[test]
    fn histogram_counts_every_value(v in prop::collection::vec(prop::num::f64::ANY, 0..200)) {
        let h = Histogram::new(v.iter().copied(), -2.5, 2.5, 100).unwrap();
        prop_assert_eq!(h.total(), v.len() as u64);
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = format::decode(&bytes);
    }

    #[test]
    fn decoding_mutated_header_never_panics(tail in prop::collection::vec(any::<u8>(), 0..128)) {
        let mut bytes = format::MAGIC.to_vec();
        bytes.extend(format::VERSION.to_le_bytes());
        bytes.extend(tail);
        let _ = format::decode(&bytes);
    }
}
