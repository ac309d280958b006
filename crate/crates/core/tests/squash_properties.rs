use pcaps_core::activation::squash_capsule;
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    // |v| stays below ~28, where 1 - e^-|v| is still distinguishable from 1
    #[test]
    fn norm_direction_and_bound(v in prop::collection::vec(-4.0f64..4.0, 1..48)) {
        let r = norm(&v);
        prop_assume!(r > 1e-12);
        let mut out = vec![0.0; v.len()];
        squash_capsule(&v, &mut out);
        let s = norm(&out);
        prop_assert!((s - (1.0 - (-r).exp())).abs() <= 1e-9);
        prop_assert!(s < 1.0);
        let cos = v.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() / (r * s);
        prop_assert!(cos >= 1.0 - 1e-9);
    }

    #[test]
    fn tiny_capsules(v in prop::collection::vec(-1e-4f64..1e-4, 1..16)) {
        let r = norm(&v);
        prop_assume!(r > 1e-30);
        let mut out = vec![0.0; v.len()];
        squash_capsule(&v, &mut out);
        prop_assert!((norm(&out) - (-(-r).exp_m1())).abs() <= 1e-15);
    }
}
