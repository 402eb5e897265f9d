mod common;

use proptest::prelude::*;
use scbm::metrics::{brier, concept_accuracy, ece, jaccard, target_accuracy, ECE_BINS};

use common::{FIXTURE_C, FIXTURE_P};

#[test]
fn hand_counted_fixture() {
    assert!((concept_accuracy(&FIXTURE_P, &FIXTURE_C) - 0.75).abs() < 1e-12);
    assert!((jaccard(&FIXTURE_P, &FIXTURE_C) - 2.0 / 3.0).abs() < 1e-12);
    assert!((brier(&FIXTURE_P, &FIXTURE_C) - 0.2425).abs() < 1e-12);
}

#[test]
fn calibrated_bins_have_zero_error() {
    // Confidence 0.8 with 8 of 10 right, confidence 0.6 with 3 of 5 right.
    let mut p = vec![0.8; 10];
    let mut c = vec![1.0; 8];
    c.extend([0.0, 0.0]);
    p.extend([0.4; 5]);
    c.extend([0.0, 0.0, 0.0, 1.0, 1.0]);
    assert!(ece(&p, &c, ECE_BINS).abs() < 1e-12);
}

#[test]
fn target_accuracy_counts_argmax_hits() {
    let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.5, 0.5]];
    assert!((target_accuracy(&probs, &[0, 0, 0]) - 2.0 / 3.0).abs() < 1e-12);
}

fn paired(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n),
        )
    })
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order((p, c) in paired(40), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        scbm::rng::RandomStream::new(seed).shuffle(&mut idx);
        let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let cs: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
        prop_assert_eq!(concept_accuracy(&p, &c), concept_accuracy(&ps, &cs));
        prop_assert_eq!(jaccard(&p, &c), jaccard(&ps, &cs));
        prop_assert!((brier(&p, &c) - brier(&ps, &cs)).abs() < 1e-12);
        prop_assert!((ece(&p, &c, ECE_BINS) - ece(&ps, &cs, ECE_BINS)).abs() < 1e-12);
    }

    #[test]
    fn brier_falls_when_a_prediction_moves_toward_its_label(
        (p, c) in paired(20), pick in any::<prop::sample::Index>(), frac in 0.01f64..1.0,
    ) {
        let i = pick.index(p.len());
        prop_assume!((p[i] - c[i]).abs() > 1e-9);
        let mut q = p.clone();
        q[i] += frac * (c[i] - p[i]);
        prop_assert!(brier(&q, &c) < brier(&p, &c));
    }

    #[test]
    fn metrics_stay_in_the_unit_interval((p, c) in paired(40)) {
        for v in [concept_accuracy(&p, &c), jaccard(&p, &c), brier(&p, &c), ece(&p, &c, ECE_BINS)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
