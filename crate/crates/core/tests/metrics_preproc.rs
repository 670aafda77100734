mod common;

use common::props::{metric_oracles, preprocessing_fidelity};
use proptest::prelude::*;
use spiro_core::eval::roc_auc;

#[test]
fn auc_and_brier_match_oracles() {
    let rep = metric_oracles(1000, 21);
    assert!(rep.auc_err <= 1e-12, "{rep:?}");
    assert!(rep.brier_err <= 1e-12, "{rep:?}");
    assert!(rep.symmetry_err <= 1e-12, "{rep:?}");
}

#[test]
fn noiseless_blows_recover_ground_truth() {
    let rep = preprocessing_fidelity(300, 22);
    assert!(rep.fvc_rel < 0.02, "{rep:?}");
    assert!(rep.pef_rel < 0.02, "{rep:?}");
    assert!(rep.integral_rel < 0.01, "{rep:?}");
    assert!(rep.smoothing_abs <= 1e-12, "{rep:?}");
}

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)
    ) {
        let (s, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assume!(y.contains(&0) && y.contains(&1));
        let a = roc_auc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert!((roc_auc(&t, &y).unwrap() - a).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
