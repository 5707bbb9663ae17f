use std::collections::BTreeMap;
use std::time::Instant;

use vbiopsy_core::imaging::{resample, resample_mask, Interpolation, PatchSpec};
use vbiopsy_core::phantom::{build_manifest, generate_cohort, CohortSpec, StratifyKey};
use vbiopsy_core::segmenter::{
    largest_component, mean_foreground_dice, segment, train_segmenter, SegSample, SegTarget, SegmenterConfig,
};

fn desk_samples(n: usize, target: SegTarget) -> (BTreeMap<String, SegSample>, vbiopsy_core::phantom::Manifest) {
    let cases = generate_cohort(&CohortSpec { n, ..Default::default() }).unwrap();
    let mut data = BTreeMap::new();
    for p in &cases {
        let image = resample(&p.volume, PatchSpec::DESK_SPACING, Interpolation::BSpline).unwrap();
        let m = match target {
            SegTarget::Gland => &p.gland,
            SegTarget::Zones => &p.zones,
        };
        let target = resample_mask(m, PatchSpec::DESK_SPACING).unwrap();
        data.insert(p.record.case_id.clone(), SegSample { image, target });
    }
    let records: Vec<_> = cases.iter().map(|p| p.record.clone()).collect();
    let manifest = build_manifest(&records, [0.6, 0.2, 0.2], StratifyKey::Risk, 3).unwrap();
    (data, manifest)
}

#[test]
fn gland_segmenter_learns_phantoms() {
    let (data, manifest) = desk_samples(20, SegTarget::Gland);
    let t = Instant::now();
    let state = train_segmenter(&data, &manifest, &SegmenterConfig::default()).unwrap();
    eprintln!("trained in {:?}: {:?}", t.elapsed(), state.curve);
    let mut total = 0.0;
    for id in manifest.test() {
        let s = &data[id];
        let pred = largest_component(&segment(&s.image, &state, SegTarget::Gland).unwrap()).mask;
        total += mean_foreground_dice(&pred, &s.target).unwrap();
    }
    let dsc = total / manifest.test().len() as f64;
    eprintln!("test DSC {dsc}");
    assert!(dsc >= 0.85, "test DSC {dsc}");
}
