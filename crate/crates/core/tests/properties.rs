use plab::arrow::{woodbury_apply, GradientWindow};
use plab::cbp::select_replacements;
use plab::linalg::norm2;
use plab::metrics::{aat, erank, srank};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn aat_is_permutation_invariant(mut acc in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
        let a = aat(&acc).unwrap();
        let n = acc.len();
        acc.rotate_left((seed as usize) % n);
        acc.reverse();
        prop_assert_eq!(aat(&acc).unwrap(), a);
        let lo = acc.iter().cloned().fold(1.0, f64::min);
        let hi = acc.iter().cloned().fold(0.0, f64::max);
        prop_assert!(a >= lo - 1e-15 && a <= hi + 1e-15);
    }

    #[test]
    fn erank_and_srank_lie_between_one_and_support(sv in prop::collection::vec(0.0f64..100.0, 1..30)) {
        let support = sv.iter().filter(|&&s| s > 0.0).count() as f64;
        let e = erank(&sv).unwrap();
        let s = srank(&sv).unwrap();
        if support == 0.0 {
            prop_assert!(e.degenerate && s.degenerate);
        } else {
            prop_assert!(e.value >= 1.0 - 1e-12 && e.value <= support + 1e-9);
            prop_assert!(s.value >= 1.0 - 1e-12 && s.value <= support + 1e-9);
        }
    }

    #[test]
    fn woodbury_step_never_exceeds_the_undamped_bound(
        vs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..8),
        g in prop::collection::vec(-1.0f64..1.0, 6),
        alpha in 1e-3f64..1.0,
        beta in 0.0f64..1.3,
    ) {
        // (alpha I + beta C)^{-1} has spectral norm at most 1/alpha.
        let mut w = GradientWindow::new("g", 6, vs.len());
        for v in &vs {
            w.push(v).unwrap();
        }
        let r = woodbury_apply(&w, alpha, beta, &g).unwrap();
        prop_assert!(norm2(&r) <= norm2(&g) / alpha * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn replacement_count_is_floor_of_owed(
        ages in prop::collection::vec(0u64..10, 1..80),
        rate in 0.0f64..0.5,
        carry in 0.0f64..1.0,
    ) {
        let util: Vec<f64> = (0..ages.len()).map(|i| (i % 7) as f64).collect();
        let mut c = carry;
        let got = select_replacements(&ages, &util, 5, rate, &mut c);
        let eligible = ages.iter().filter(|&&a| a >= 5).count();
        let owed = rate * eligible as f64 + carry;
        prop_assert_eq!(got.len(), (owed.floor() as usize).min(eligible));
        prop_assert!((0.0..1.0 + 1e-12).contains(&c) || got.len() == eligible);
        prop_assert!(got.iter().all(|&i| ages[i] >= 5));
    }
}
