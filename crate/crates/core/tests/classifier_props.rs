mod common;

use proptest::prelude::*;
use rand::Rng;

use vbiopsy_autograd::sigmoid;
use vbiopsy_core::classifier::{
    ensemble_predict, focal_loss, logit, weighted_bce, ClassifierConfig, ClassifierState, ClinicalStats, Family,
    InputVariant, LossKind, RiskPrediction,
};
use vbiopsy_core::imaging::{ChannelRole, Grid3, PatchScale, PatchStack};

fn member(p: f64, tag: &str) -> RiskPrediction {
    RiskPrediction { case_id: "c".into(), probability: p, logit: logit(p), model_tag: tag.into(), scale: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn focal_half_no_focusing_is_half_bce(p in 0.0f64..=1.0, y in any::<bool>()) {
        let f = focal_loss(p, y, 0.5, 0.0).unwrap();
        let b = weighted_bce(p, y, 1.0).unwrap();
        prop_assert!((f - 0.5 * b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn ensemble_is_bounded_and_order_free(ps in proptest::collection::vec(0.0f64..=1.0, 1..6), seed in any::<u64>()) {
        let members: Vec<_> = ps.iter().enumerate().map(|(i, &p)| member(p, &format!("m{i}"))).collect();
        let e = ensemble_predict(&members).unwrap();
        let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e.probability >= lo - 1e-12 && e.probability <= hi + 1e-12);
        let mut shuffled = members.clone();
        let mut r = common::rng(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        prop_assert!((ensemble_predict(&shuffled).unwrap().probability - e.probability).abs() < 1e-12);
    }

    #[test]
    fn clinical_standardisation_uses_train_statistics(rows in proptest::collection::vec((40.0f64..90.0, 0.01f64..2.0), 3..30), held in (40.0f64..90.0, 0.01f64..2.0)) {
        let train: Vec<Vec<f64>> = rows.iter().map(|&(a, d)| vec![a, d]).collect();
        let Ok(stats) = ClinicalStats::fit(&train) else { return Ok(()) };
        let z: Vec<Vec<f64>> = train.iter().map(|r| stats.standardize(r).unwrap()).collect();
        for j in 0..2 {
            let n = z.len() as f64;
            let mean = z.iter().map(|r| r[j]).sum::<f64>() / n;
            let std = (z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        }
        // a held-out row is mapped with the training mean and spread, recomputed here
        let out = stats.standardize(&[held.0, held.1]).unwrap();
        let n = train.len() as f64;
        for (j, v) in [held.0, held.1].into_iter().enumerate() {
            let m = train.iter().map(|r| r[j]).sum::<f64>() / n;
            let s = (train.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((out[j] - (v - m) / s).abs() < 1e-9);
        }
    }
}

#[test]
fn loss_hand_values() {
    assert!((focal_loss(0.5, true, 0.8, 2.0).unwrap() - 0.13863).abs() < 1e-4);
    assert!((weighted_bce(0.5, true, LossKind::POS_WEIGHT_MAIN).unwrap() - 1.6233).abs() < 1e-4);
    assert!(focal_loss(1.0, true, 0.8, 2.0).unwrap() < 1e-12);
    assert!((focal_loss(0.3, true, 1.0, 0.0).unwrap() + 0.3f64.ln()).abs() < 1e-12);
    assert_eq!(weighted_bce(0.3, false, 5.0).unwrap(), weighted_bce(0.3, false, 1.0).unwrap());
    assert!(weighted_bce(0.3, true, 0.0).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in [LossKind::FOCAL_DEFAULT, LossKind::WeightedBce { pos_weight: LossKind::POS_WEIGHT_MAIN }] {
        let err = common::loss_gradient_error(kind, 50, 11);
        assert!(err < 1e-3, "{kind:?}: {err}");
    }
}

#[test]
fn predictions_are_sigmoid_of_logit() {
    let mut r = common::rng(2);
    for (family, variant) in [
        (Family::Foundation, InputVariant::Gland),
        (Family::Foundation, InputVariant::ImageOnly),
        (Family::Cnn, InputVariant::Gland),
    ] {
        let cfg = ClassifierConfig::desk(family, variant, PatchScale::S160);
        let state = ClassifierState::init(cfg.clone()).unwrap();
        let [x, y, z] = cfg.patch_size;
        for _ in 0..5 {
            let img = Grid3::from_vec([x, y, z], (0..x * y * z).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
            let patch = match variant.prior() {
                None => PatchStack::new(vec![img], vec![ChannelRole::Image], [2.5, 2.5, 6.0], [0; 3]).unwrap(),
                Some(_) => {
                    let prior = img.map(|v| f64::from(u8::from(v > 0.0)));
                    PatchStack::new(
                        vec![img.clone(), img, prior],
                        vec![ChannelRole::Image, ChannelRole::Image, ChannelRole::Prior],
                        [2.5, 2.5, 6.0],
                        [0; 3],
                    )
                    .unwrap()
                }
            };
            let p = state.predict("c", &patch, None).unwrap();
            assert!((p.probability - sigmoid(p.logit)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&p.probability));
        }
    }
}
