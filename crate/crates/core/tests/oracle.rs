use mips_core::oracle::{
    covariance_identity, direct_mips_bias, exact_mips_bias, exact_mse_gain,
    exact_variance_reduction, random_instance, InstanceShape, TabularInstance,
};
use mips_core::rng::seeded;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = InstanceShape> {
    (
        1usize..4,
        2usize..7,
        1usize..5,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(x, a, e, nde, deficient)| {
            let mut s = InstanceShape::new(x, a, e);
            s.no_direct_effect = nde;
            s.deficient_actions = deficient;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pairwise_bias_matches_enumeration(seed in any::<u64>(), shape in shape()) {
        let inst = random_instance(&mut seeded(seed), &shape).unwrap();
        let direct = direct_mips_bias(&inst);
        match exact_mips_bias(&inst) {
            Ok(b) => prop_assert!((b - direct).abs() <= 1e-10, "{} vs {}", b, direct),
            Err(_) => prop_assert!(!inst.common_support()),
        }
        if inst.no_direct_effect() && inst.common_embedding_support() {
            prop_assert!(direct.abs() <= 1e-10);
        }
    }

    #[test]
    fn variance_reduction_identity_and_sign(seed in any::<u64>(), x in 1usize..4, a in 2usize..7, e in 1usize..5) {
        let mut s = InstanceShape::new(x, a, e);
        s.no_direct_effect = true;
        let inst = random_instance(&mut seeded(seed), &s).unwrap();
        let vr = exact_variance_reduction(&inst).unwrap();
        prop_assert!((vr.value - (vr.ips_variance - vr.mips_variance)).abs() <= 1e-10);
        prop_assert!(vr.value >= -1e-12);
    }

    #[test]
    fn mse_gain_identity(seed in any::<u64>(), shape in shape(), n in 1usize..50) {
        let mut shape = shape;
        shape.deficient_actions = false;
        let inst = random_instance(&mut seeded(seed), &shape).unwrap();
        let gain = exact_mse_gain(&inst, n).unwrap();
        prop_assert!((gain.value - gain.direct).abs() <= 1e-10 * gain.direct.abs().max(1.0));
    }

    #[test]
    fn covariance_identity_holds(
        triple in (1usize..=12).prop_flat_map(|m| (
            prop::collection::vec(-5.0f64..5.0, m),
            prop::collection::vec(-5.0f64..5.0, m),
            prop::collection::vec(0.01f64..1.0, m),
        ))
    ) {
        let (f, h, g) = triple;
        let total: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / total).collect();
        let (lhs, rhs) = covariance_identity(&f, &g, &h).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }
}

#[test]
fn instance_json_file_round_trip() {
    let mut s = InstanceShape::new(2, 4, 3);
    s.deficient_actions = true;
    let inst = random_instance(&mut seeded(11), &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inst.json");
    inst.write_json(&path).unwrap();
    assert_eq!(TabularInstance::read_json(&path).unwrap(), inst);
}
