use gsbmdpo::oracles::{run_verify, DiscretePathMeasure, brute_force_tilt, path_kl, terminal_kl};
use gsbmdpo::rng;
use proptest::prelude::*;

#[test]
fn verify_suite_passes_and_is_deterministic() {
    let a = run_verify(3).unwrap();
    assert!(a.all_passed(), "{a}");
    assert_eq!(a, run_verify(3).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_kl_never_below_terminal_kl(seed in any::<u64>()) {
        let mut r = rng::stream(seed, 0);
        let p = DiscretePathMeasure::random_chain(3, 3, &mut r);
        let q = DiscretePathMeasure::random_chain(3, 3, &mut r);
        prop_assert!(path_kl(&p, &q).unwrap() >= terminal_kl(&p, &q).unwrap() - 1e-12);
    }

    #[test]
    fn tilting_is_shift_invariant(seed in any::<u64>(), shift in -5.0..5.0f64, alpha in 0.1..4.0f64) {
        let mut r = rng::stream(seed, 0);
        let pk = DiscretePathMeasure::random_chain(3, 3, &mut r);
        let a = [0.3, -1.1, 0.8];
        let b = a.map(|x| x + shift);
        let ta = brute_force_tilt(&pk, &a, alpha).unwrap();
        let tb = brute_force_tilt(&pk, &b, alpha).unwrap();
        prop_assert!(ta.total_variation(&tb) < 1e-12);
    }
}
