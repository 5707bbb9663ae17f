mod common;

use proptest::prelude::*;

use vbiopsy_core::imaging::{
    augment, crop_to_roi, normalize, percentile, resample, resample_mask, rounded_centroid, AugmentationConfig,
    ChannelRole, Geometry, Grid3, Interpolation, NormMethod, PatchScale, PatchSpec, PatchStack, Volume3D,
};
use vbiopsy_core::phantom::{generate_phantom, PhantomParams};

fn field(dims: [usize; 3], spacing: [f64; 3], f: impl Fn([f64; 3]) -> f64) -> Volume3D {
    let mut g = Grid3::filled(dims, 0.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                g.set(x, y, z, f([x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]));
            }
        }
    }
    Volume3D::new(g, Geometry::with_spacing(spacing).unwrap()).unwrap()
}

/// Voxels of `v` whose centres lie within the physical span of the source grid.
fn interior_errors(v: &Volume3D, src_dims: [usize; 3], src_spacing: [f64; 3], f: impl Fn([f64; 3]) -> f64) -> f64 {
    let s = v.spacing();
    let mut worst: f64 = 0.0;
    for z in 0..v.dims()[2] {
        for y in 0..v.dims()[1] {
            for x in 0..v.dims()[0] {
                let p = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
                if (0..3).all(|a| p[a] <= (src_dims[a] - 1) as f64 * src_spacing[a] + 1e-9) {
                    worst = worst.max((v.grid.get(x, y, z) - f(p)).abs());
                }
            }
        }
    }
    worst
}

fn spacing_strategy() -> impl Strategy<Value = [f64; 3]> {
    [0.4f64..3.0, 0.4f64..3.0, 1.0f64..6.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_field_survives_double_resampling(c in -500.0f64..500.0, s1 in spacing_strategy(), s2 in spacing_strategy()) {
        let v = field([12, 10, 5], [1.0, 1.0, 3.0], |_| c);
        let once = resample(&v, s1, Interpolation::BSpline).unwrap();
        let twice = resample(&resample(&once, s2, Interpolation::BSpline).unwrap(), s1, Interpolation::BSpline).unwrap();
        for g in [&once.grid, &twice.grid] {
            prop_assert!(g.data().iter().all(|x| (x - c).abs() < 1e-5));
        }
        let again = resample(&once, s1, Interpolation::BSpline).unwrap();
        prop_assert_eq!(again.grid.data(), once.grid.data());
    }

    #[test]
    fn ramp_is_reproduced_and_idempotent(a in -50.0f64..50.0, b in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0], s1 in spacing_strategy()) {
        let src = [1.0, 1.0, 3.0];
        let dims = [12, 10, 6];
        let ramp = |p: [f64; 3]| a + b[0] * p[0] + b[1] * p[1] + b[2] * p[2];
        let v = field(dims, src, ramp);
        let once = resample(&v, s1, Interpolation::BSpline).unwrap();
        prop_assert!(interior_errors(&once, dims, src, ramp) < 1e-5);
        let again = resample(&once, s1, Interpolation::BSpline).unwrap();
        prop_assert_eq!(again.grid.data(), once.grid.data());
    }

    #[test]
    fn nearest_mode_only_emits_input_values(seed in 0u64..1000, s in spacing_strategy()) {
        let mut r = common::rng(seed);
        let m = common::random_mask(&mut r, [9, 7, 4], vbiopsy_core::imaging::LabelScheme::Zones, 0.4);
        let out = resample_mask(&m, s).unwrap();
        prop_assert_eq!(out.geometry.spacing, s);
        let seen: std::collections::BTreeSet<u8> = m.grid.data().iter().copied().collect();
        prop_assert!(out.grid.data().iter().all(|v| seen.contains(v)));
    }

    #[test]
    fn crop_shape_matches_spec_over_random_phantoms(seed in 0u64..10_000, lesions in 0usize..2, scale_i in 0usize..3) {
        let p = generate_phantom(&PhantomParams { rng_seed: seed, lesion_count: lesions, ..Default::default() }).unwrap();
        let scale = PatchScale::ALL[scale_i];
        let v = resample(&p.volume, PatchSpec::DESK_SPACING, Interpolation::BSpline).unwrap();
        let g = resample_mask(&p.gland, PatchSpec::DESK_SPACING).unwrap();
        let spec = PatchSpec::desk(scale);
        let patch = crop_to_roi(&v, &g, &spec).unwrap();
        prop_assert_eq!(patch.dims(), spec.size);
        let c = rounded_centroid(&g).unwrap();
        for a in 0..3 {
            prop_assert_eq!(patch.window_origin[a], c[a] - (spec.size[a] / 2) as i64);
        }
    }

    #[test]
    fn augment_is_pure(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let patch = common::prior_patch(seed % 97, [10, 9, 4]);
        let mut cfg = AugmentationConfig { rng_seed: seed, ..Default::default() };
        cfg.set_all_probs(p);
        let a = augment(&patch, &cfg).unwrap();
        let b = augment(&patch, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.patch.channels().iter().flat_map(|c| c.data()).all(|v| v.is_finite()));
    }

    #[test]
    fn pminmax_lands_in_unit_interval(values in proptest::collection::vec(-1e4f64..1e4, 24), extra in -1e6f64..1e6) {
        let mut v = values;
        v.push(extra);
        let g = Grid3::from_vec([5, 5, 1], v).unwrap();
        let patch = PatchStack::new(vec![g], vec![ChannelRole::Image], [1.0; 3], [0; 3]).unwrap();
        let out = normalize(&patch, NormMethod::Pminmax).unwrap();
        prop_assert!(out.patch.channel(0).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn prior_is_invariant_under_intensity_transforms(seed in any::<u64>()) {
        let patch = common::prior_patch(seed % 31, [10, 10, 4]);
        let mut cfg = AugmentationConfig { rng_seed: seed, ..Default::default() };
        cfg.set_all_probs(0.7);
        prop_assert_eq!(common::check_prior_hygiene(&patch, &cfg), Ok(()));
    }
}

#[test]
fn pminmax_matches_sorted_percentile_oracle() {
    let values: Vec<f64> = (0..=100).rev().map(f64::from).collect();
    let g = Grid3::from_vec([101, 1, 1], values.clone()).unwrap();
    let patch = PatchStack::new(vec![g], vec![ChannelRole::Image], [1.0; 3], [0; 3]).unwrap();
    let out = normalize(&patch, NormMethod::Pminmax).unwrap();
    // rank-based percentile on 0..=100 puts p1 at 1 and p99 at 99
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!((percentile(&sorted, 1.0), percentile(&sorted, 99.0)), (1.0, 99.0));
    for (o, v) in out.patch.channel(0).data().iter().zip(&values) {
        assert!((o - ((v - 1.0) / 98.0).clamp(0.0, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn zscore_is_standardised_and_degenerate_is_flagged() {
    let patch = common::prior_patch(4, [8, 8, 3]);
    let out = normalize(&patch, NormMethod::Zscore).unwrap();
    let d = out.patch.channel(0).data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    assert_eq!(out.patch.channel(2), patch.channel(2));

    let flat = PatchStack::new(vec![Grid3::filled([4, 4, 2], 3.0)], vec![ChannelRole::Image], [1.0; 3], [0; 3]).unwrap();
    let out = normalize(&flat, NormMethod::Pminmax).unwrap();
    assert_eq!(out.degenerate, vec![0]);
    assert!(out.patch.channel(0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn disabled_augmentation_is_identity() {
    let patch = common::prior_patch(9, [8, 8, 3]);
    let out = augment(&patch, &AugmentationConfig::disabled(5)).unwrap();
    assert!(out.applied.is_empty());
    assert_eq!(out.patch, patch);
}
