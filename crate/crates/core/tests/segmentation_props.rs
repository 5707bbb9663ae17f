mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use vbiopsy_core::imaging::{Geometry, Grid3, LabelMask, LabelScheme, PatchSpec};
use vbiopsy_core::pipeline::prepare_case;
use vbiopsy_core::phantom::{generate_cohort, CohortSpec, Manifest};
use vbiopsy_core::segmenter::{
    dice, dice_detailed, gland_volume_cc, largest_component, psa_density, segment, train_segmenter, SegTarget,
    SegmenterConfig, SegmenterState,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dice_matches_set_oracle_and_is_symmetric(seed in any::<u64>(), da in 0.0f64..0.8, db in 0.0f64..0.8) {
        let mut r = common::rng(seed);
        let a = common::random_mask(&mut r, [7, 6, 4], LabelScheme::Zones, da);
        let b = common::random_mask(&mut r, [7, 6, 4], LabelScheme::Zones, db);
        for label in [1, 2] {
            let d = dice(&a, &b, label).unwrap();
            prop_assert_eq!(d, common::dice_oracle(&a, &b, label));
            prop_assert_eq!(d, dice(&b, &a, label).unwrap());
            if a.count(label) > 0 {
                prop_assert_eq!(dice(&a, &a, label).unwrap(), 1.0);
                let empty = LabelMask::new(Grid3::filled(a.dims(), 0), a.scheme, a.geometry).unwrap();
                prop_assert_eq!(dice(&a, &empty, label).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn largest_component_matches_flood_fill_and_is_idempotent(seed in any::<u64>(), zones in any::<bool>()) {
        let mut r = common::rng(seed);
        let scheme = if zones { LabelScheme::Zones } else { LabelScheme::Gland };
        let m = common::random_blobs(&mut r, [10, 9, 5], scheme);
        let once = largest_component(&m);
        let oracle = common::largest_component_oracle(&m);
        prop_assert_eq!(once.mask.grid.data(), oracle.data());
        let twice = largest_component(&once.mask);
        prop_assert_eq!(&twice.mask, &once.mask);
    }

    #[test]
    fn gland_volume_is_additive_over_disjoint_masks(seed in any::<u64>(), sx in 0.2f64..3.0, sz in 0.5f64..6.0) {
        let mut r = common::rng(seed);
        let geom = Geometry::with_spacing([sx, sx, sz]).unwrap();
        let m = common::random_mask(&mut r, [8, 8, 3], LabelScheme::Zones, 0.6);
        let part = |label: u8| LabelMask::new(m.grid.map(|v| u8::from(v == label)), LabelScheme::Gland, geom).unwrap();
        let whole = LabelMask::new(m.to_gland().grid, LabelScheme::Gland, geom).unwrap();
        let sum = gland_volume_cc(&part(1)) + gland_volume_cc(&part(2));
        prop_assert!((gland_volume_cc(&whole) - sum).abs() <= 1e-12 * sum.max(1.0));
    }
}

#[test]
fn dice_and_volume_fixtures() {
    let geom = Geometry::with_spacing([1.0; 3]).unwrap();
    let mk = |v: Vec<u8>| LabelMask::new(Grid3::from_vec([4, 1, 1], v).unwrap(), LabelScheme::Gland, geom).unwrap();
    assert_eq!(dice(&mk(vec![1, 1, 0, 0]), &mk(vec![0, 1, 1, 0]), 1).unwrap(), 0.5);
    assert_eq!(dice_detailed(&mk(vec![0; 4]), &mk(vec![0; 4]), 1).unwrap(), (1.0, true));

    let g = Geometry::with_spacing([0.5, 0.5, 3.0]).unwrap();
    let m = LabelMask::new(Grid3::filled([10, 10, 10], 1), LabelScheme::Gland, g).unwrap();
    assert!((gland_volume_cc(&m) - 0.75).abs() < 1e-12);
    assert!((psa_density(7.5, 50.0).unwrap() - 0.15).abs() < 1e-12);
    assert!(psa_density(7.5, 0.0).is_err());
}

#[test]
fn training_loss_is_finite_and_untrained_output_keeps_shape() {
    let cases: Vec<_> = generate_cohort(&CohortSpec { n: 6, ..Default::default() })
        .unwrap()
        .iter()
        .map(|p| prepare_case(p, PatchSpec::DESK_SPACING).unwrap())
        .collect();
    let ids: Vec<String> = cases.iter().map(|c| c.id().to_string()).collect();
    let data: BTreeMap<_, _> = cases.iter().map(|c| (c.id().to_string(), c.seg_sample(SegTarget::Zones))).collect();
    let manifest = Manifest::from_splits(ids[..4].to_vec(), ids[4..5].to_vec(), ids[5..].to_vec());
    let cfg = SegmenterConfig { target: SegTarget::Zones, epochs: 3, ..Default::default() };

    let untrained = SegmenterState::init(cfg.clone()).unwrap();
    let out = segment(&cases[0].image, &untrained, SegTarget::Zones).unwrap();
    assert_eq!(out.dims(), cases[0].image.dims());
    assert_eq!(out.scheme, LabelScheme::Zones);

    let state = train_segmenter(&data, &manifest, &cfg).unwrap();
    assert!(!state.curve.is_empty() && state.curve.len() <= cfg.epochs);
    assert!(state.curve.iter().all(|e| e.train_loss.is_finite() && (0.0..=1.0).contains(&e.val_dsc)));
}
