use pcaps_core::gradcheck::{run_suite, COMPONENT_TOLERANCE, NETWORK_TOLERANCE, STEP};
use pcaps_core::model::preset;

#[test]
fn every_backward_pass_matches_central_differences() {
    assert_eq!(STEP, 1e-5);
    assert_eq!((COMPONENT_TOLERANCE, NETWORK_TOLERANCE), (1e-6, 1e-5));
    for seed in 0..8 {
        let rows = run_suite(&preset("toy").unwrap(), seed, None).unwrap();
        assert_eq!(rows.len(), 7);
        for r in rows {
            assert!(r.checked > 0);
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }
}
