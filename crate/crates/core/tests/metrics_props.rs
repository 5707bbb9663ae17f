mod common;

use proptest::prelude::*;

use vbiopsy_core::metrics::{cohens_kappa, composite_score, confusion_metrics, evaluate_scores, roc_auc, Rate};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_equals_pair_count(seed in any::<u64>(), n in 2usize..60) {
        let mut r = common::rng(seed);
        let (s, l) = common::random_scored(&mut r, n);
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), common::brute_auc(&s, &l));
    }

    #[test]
    fn auc_identities(values in proptest::collection::btree_set(-1_000_000i64..1_000_000, 4..40), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        // distinct scores, so there are no ties
        let s: Vec<f64> = values.iter().map(|&v| v as f64 / 1000.0).collect();
        let n = s.len();
        let mut l: Vec<bool> = (0..n).map(|_| rand::Rng::random::<bool>(&mut r)).collect();
        l[0] = true;
        l[1] = false;
        let auc = roc_auc(&s, &l).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc + roc_auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        let mono: Vec<f64> = s.iter().map(|v| (v / 100.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auc, roc_auc(&mono, &l).unwrap());
    }

    #[test]
    fn composite_is_monotone(base in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0], i in 0usize..4, bump in 0.0f64..=1.0) {
        let mut up = base;
        up[i] = (up[i] + bump).min(1.0);
        let a = composite_score(base[0], base[1], base[2], base[3]).unwrap();
        let b = composite_score(up[0], up[1], up[2], up[3]).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn confusion_identities(preds in proptest::collection::vec(any::<bool>(), 1..50), labels_seed in any::<u64>()) {
        let mut r = common::rng(labels_seed);
        let labels: Vec<bool> = (0..preds.len()).map(|_| rand::Rng::random::<bool>(&mut r)).collect();
        let rep = confusion_metrics(&preds, &labels).unwrap();
        prop_assert_eq!(rep.confusion.total(), preds.len());
        if let (Some(se), Some(sp)) = (rep.sensitivity.value(), rep.specificity.value()) {
            prop_assert_eq!(rep.balanced_accuracy.value().unwrap(), (se + sp) / 2.0);
        } else {
            prop_assert!(rep.balanced_accuracy.value().is_none());
        }
        for rate in [&rep.sensitivity, &rep.specificity, &rep.precision, &rep.f1, &rep.accuracy] {
            if let Rate::Value(v) = rate {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn kappa_self_agreement_and_relabel_symmetry(a in proptest::collection::vec(0u8..3, 2..40), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let b: Vec<u8> = a.iter().map(|&x| if rand::Rng::random::<f64>(&mut r) < 0.3 { (x + 1) % 3 } else { x }).collect();
        let distinct = a.iter().collect::<std::collections::BTreeSet<_>>().len();
        if distinct >= 2 {
            prop_assert_eq!(cohens_kappa(&a, &a).unwrap().kappa, 1.0);
        }
        let k = cohens_kappa(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&k.kappa));
        let relabel = |v: &[u8]| v.iter().map(|&x| (x + 2) % 3).collect::<Vec<_>>();
        let k2 = cohens_kappa(&relabel(&a), &relabel(&b)).unwrap();
        prop_assert!((k.kappa - k2.kappa).abs() < 1e-12);
    }
}

#[test]
fn hand_fixtures() {
    // TP=3, FN=1, TN=4, FP=2
    let preds = [true, true, true, false, false, false, false, false, true, true];
    let labels = [true, true, true, true, false, false, false, false, false, false];
    let r = confusion_metrics(&preds, &labels).unwrap();
    assert_eq!(r.sensitivity, Rate::Value(0.75));
    assert_eq!(r.specificity, Rate::Value(4.0 / 6.0));
    assert_eq!(r.f1, Rate::Value(6.0 / 9.0));
    assert!(confusion_metrics(&[true], &[false]).unwrap().sensitivity.value().is_none());

    let k = cohens_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
    assert_eq!((k.observed, k.expected, k.kappa), (0.5, 0.5, 0.0));
    assert!(cohens_kappa(&[1, 1], &[1, 1]).unwrap().degenerate);

    let rep = evaluate_scores(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false], 0.5).unwrap();
    assert_eq!(rep.auc, Some(0.75));
    assert!(rep.composite_score.is_some());
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}
