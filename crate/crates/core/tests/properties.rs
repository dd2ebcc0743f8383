use std::collections::BTreeSet;

use proptest::prelude::*;

use neucept::evaluation::{clusters_entropy, noise_schedule};
use neucept::oracle::{empirical_mi, DiscreteTable};
use neucept::selection::{knockoff_threshold, select};

fn w_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -5.0..5.0f64, (-8i32..8).prop_map(|v| v as f64 / 2.0)], 0..40)
}

proptest! {
    #[test]
    fn threshold_is_monotone_in_q(w in w_vec(), q1 in 0.01..0.99f64, q2 in 0.01..0.99f64) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (t_lo, t_hi) = (knockoff_threshold(&w, lo), knockoff_threshold(&w, hi));
        prop_assert!(t_hi <= t_lo);
        let s_lo: BTreeSet<_> = select(&w, t_lo).into_iter().collect();
        let s_hi: BTreeSet<_> = select(&w, t_hi).into_iter().collect();
        prop_assert!(s_lo.is_subset(&s_hi));
    }

    #[test]
    fn threshold_is_a_positive_candidate(w in w_vec(), q in 0.01..0.99f64) {
        let t = knockoff_threshold(&w, q);
        if t.is_finite() {
            prop_assert!(t > 0.0);
            prop_assert!(w.iter().any(|v| v.abs() == t));
            let sel = select(&w, t).len() as f64;
            let neg = w.iter().filter(|&&v| v <= -t).count() as f64;
            prop_assert!((1.0 + neg) / sel <= q);
        }
    }

    #[test]
    fn ce_bounds_and_relabel_invariance(
        pairs in prop::collection::vec((0u8..5, 0i64..4), 1..80),
        shift in 1u8..50,
    ) {
        let (c, y): (Vec<u8>, Vec<i64>) = pairs.into_iter().unzip();
        let ce = clusters_entropy(&c, &y).unwrap();
        let h = clusters_entropy(&vec![0u8; y.len()], &y).unwrap();
        prop_assert!(ce >= 0.0 && ce <= h + 1e-12);
        let c2: Vec<u16> = c.iter().map(|&v| 1000 - (v as u16) * shift as u16).collect();
        let y2: Vec<i64> = y.iter().map(|&v| -7 * v).collect();
        prop_assert!((clusters_entropy(&c2, &y2).unwrap() - ce).abs() <= 1e-12);
    }

    #[test]
    fn refinement_never_raises_ce(
        rows in prop::collection::vec((0u8..3, 0u8..3, 0i64..3), 1..80),
    ) {
        let coarse: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let fine: Vec<(u8, u8)> = rows.iter().map(|r| (r.0, r.1)).collect();
        let y: Vec<i64> = rows.iter().map(|r| r.2).collect();
        prop_assert!(clusters_entropy(&fine, &y).unwrap() <= clusters_entropy(&coarse, &y).unwrap() + 1e-12);
    }

    #[test]
    fn mi_grows_with_the_subset(
        rows in prop::collection::vec((prop::collection::vec(0i64..3, 4), 0i64..3), 1..60),
        mask in prop::collection::vec(any::<(bool, bool)>(), 4),
    ) {
        let (z, y): (Vec<Vec<i64>>, Vec<i64>) = rows.into_iter().unzip();
        let t = DiscreteTable::new(z, y).unwrap();
        let big: Vec<usize> = (0..4).filter(|&j| mask[j].0 || mask[j].1).collect();
        let small: Vec<usize> = (0..4).filter(|&j| mask[j].0).collect();
        let (ms, mb) = (empirical_mi(&t, &small).unwrap(), empirical_mi(&t, &big).unwrap());
        prop_assert!(ms >= 0.0);
        prop_assert!(ms <= mb + 1e-12);
    }

    #[test]
    fn noise_base_ignores_scores_and_mean_is_normalized(
        scores in prop::collection::vec(0.0..=1.0f64, 1..30),
        gamma in 0.0..25.0f64,
        level in 0.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let a = noise_schedule(&scores, gamma, level, 2.0, seed).unwrap();
        let b = noise_schedule(&vec![0.5; scores.len()], 1.0, 1.0, 2.0, seed).unwrap();
        prop_assert_eq!(&a.base, &b.base);
        let total: f64 = a.base.iter().zip(&scores).map(|(d, s)| d * (-gamma * s).exp2()).sum();
        if total > 0.0 {
            let mean = a.noise.iter().sum::<f64>() / scores.len() as f64;
            prop_assert!((mean - level * 2.0).abs() <= 1e-9 * (1.0 + level));
        }
    }
}
