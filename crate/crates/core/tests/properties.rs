use proptest::prelude::*;
use scaleguard::codec::{Q_MAX, Q_MIN};
use scaleguard::guard::{compute_constant, protect, recover, LayerGuard, OutlierMode};
use scaleguard::inference::{
    forward, forward_logit_division, scale_for_logit_division, Activation, BiasScaling, DenseLayer, Tensor,
};
use scaleguard::{decode, encode, inject, BitFlipMask, BitPattern, DataTypeSpec, Model};

fn spec() -> impl Strategy<Value = DataTypeSpec> {
    prop_oneof![
        Just(DataTypeSpec::FP32),
        Just(DataTypeSpec::FP16),
        Just(DataTypeSpec::QFIXED),
    ]
}

fn width_mask(spec: &DataTypeSpec) -> u32 {
    match spec.total_bits() {
        32 => u32::MAX,
        w => (1 << w) - 1,
    }
}

proptest! {
    #[test]
    fn xor_is_an_involution(spec in spec(), p in any::<u32>(), m in any::<u32>()) {
        let w = spec.total_bits();
        let pattern = BitPattern::new(p & width_mask(&spec), w).unwrap();
        let mask = BitFlipMask::new(m & width_mask(&spec), w).unwrap();
        prop_assert_eq!(inject(inject(pattern, mask).unwrap(), mask).unwrap(), pattern);
        prop_assert_eq!(inject(pattern, BitFlipMask::zeros(w).unwrap()).unwrap(), pattern);
    }

    #[test]
    fn qfixed_quantization_error_is_half_a_step(x in Q_MIN..=Q_MAX) {
        let q = DataTypeSpec::QFIXED;
        let back = decode(encode(x, &q).unwrap(), &q).unwrap();
        prop_assert!((back - x).abs() <= 1.0 / 128.0);
    }

    #[test]
    fn encode_is_monotone(spec in spec(), a in -1.99f64..1.98, b in -1.99f64..1.98) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dl = decode(encode(lo, &spec).unwrap(), &spec).unwrap();
        let dh = decode(encode(hi, &spec).unwrap(), &spec).unwrap();
        prop_assert!(dl <= dh, "{lo} -> {dl}, {hi} -> {dh}");
    }

    #[test]
    fn constant_respects_target(w in prop::collection::vec(-4.0f32..4.0, 1..64), t in 0.1f64..4.0) {
        let c = compute_constant(&w, t).unwrap();
        let max = w.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        prop_assert!(c > 0.0);
        prop_assert!(c as f64 * max <= t);
    }

    #[test]
    fn fault_free_recovery_is_within_half_a_step(
        spec in spec(),
        w in prop::collection::vec(-1.5f32..1.5, 1..64),
    ) {
        let t = scaleguard::guard::default_t(&spec);
        let (guard, exposed) = LayerGuard::optimal(0, &w, t, spec, OutlierMode::Clamp).unwrap();
        let stored = protect(&exposed, &guard).unwrap();
        let masks = vec![BitFlipMask::zeros(spec.total_bits()).unwrap(); stored.patterns.len()];
        let back = recover(&stored, &masks).unwrap();
        let c = guard.constant as f64;
        // Half an ulp of the stored value, measured in the unscaled domain.
        let step = match spec.total_bits() {
            32 => 2f64.powi(-24),
            16 => 2f64.powi(-11),
            _ => 2f64.powi(-7),
        };
        for (&orig, &r) in w.iter().zip(&back) {
            prop_assert!((r - orig as f64).abs() <= step / c + 1e-12, "{orig} -> {r} (c = {c})");
        }
    }

    #[test]
    fn logit_division_matches_baseline(
        seed_weights in prop::collection::vec(-1.0f32..1.0, 6 * 5 + 5 * 3),
        bias in prop::collection::vec(-0.5f32..0.5, 8),
        constants in prop::collection::vec(0.25f32..8.0, 2),
        x in prop::collection::vec(-1.0f32..1.0, 4 * 6),
    ) {
        let model = Model::new(vec![
            DenseLayer::new(
                Tensor::new(vec![5, 6], seed_weights[..30].to_vec()).unwrap(),
                Some(bias[..5].to_vec()),
                Activation::Relu,
            ).unwrap(),
            DenseLayer::new(
                Tensor::new(vec![3, 5], seed_weights[30..].to_vec()).unwrap(),
                Some(bias[5..].to_vec()),
                Activation::None,
            ).unwrap(),
        ]).unwrap();
        let x = Tensor::new(vec![4, 6], x).unwrap();
        let base = forward(&model, &x).unwrap();
        let scaled = scale_for_logit_division(&model, &constants, BiasScaling::Cumulative).unwrap();
        let out = forward_logit_division(&scaled, &constants, &x).unwrap();
        prop_assert_eq!(out.division_count, 3 * 4);
        for r in 0..4 {
            let scale = base.row(r).iter().fold(1e-3f32, |m, v| m.max(v.abs()));
            for (a, b) in out.logits.row(r).iter().zip(base.row(r)) {
                prop_assert!((a - b).abs() <= 1e-4 * scale, "{a} vs {b}");
            }
        }
    }
}
