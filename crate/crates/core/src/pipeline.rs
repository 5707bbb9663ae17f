//! Glue that turns cases into segmenter samples and classifier inputs.

use std::collections::BTreeMap;

use crate::classifier::{ClfSample, InputVariant};
use crate::error::{invalid, Result};
use crate::imaging::{
    assemble_channels, crop_mask, crop_to_roi, normalize, resample, resample_mask, Interpolation, LabelMask, NormMethod,
    PatchSpec, PatchStack, Volume3D,
};
use crate::phantom::{CaseRecord, Phantom};
use crate::segmenter::{gland_volume_cc, psa_density, SegSample, SegTarget};

/// A case resampled to a working spacing, with its reference masks.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub image: Volume3D,
    pub gland: LabelMask,
    pub zones: LabelMask,
    pub record: CaseRecord,
}

impl PreparedCase {
    pub fn id(&self) -> &str {
        &self.record.case_id
    }

    pub fn mask(&self, target: SegTarget) -> &LabelMask {
        match target {
            SegTarget::Gland => &self.gland,
            SegTarget::Zones => &self.zones,
        }
    }

    pub fn seg_sample(&self, target: SegTarget) -> SegSample {
        SegSample { image: self.image.clone(), target: self.mask(target).clone() }
    }
}

/// Resample a phantom's image (cubic B-spline) and masks (nearest) to `spacing`.
pub fn prepare_case(p: &Phantom, spacing: [f64; 3]) -> Result<PreparedCase> {
    Ok(PreparedCase {
        image: resample(&p.volume, spacing, Interpolation::BSpline)?,
        gland: resample_mask(&p.gland, spacing)?,
        zones: resample_mask(&p.zones, spacing)?,
        record: p.record.clone(),
    })
}

/// Crop around `roi`, normalise the image and attach the prior the variant asks for.
///
/// `prior` must be aligned with `image` (same grid); it is cropped with the same window.
pub fn classifier_patch(
    image: &Volume3D,
    roi: &LabelMask,
    prior: Option<&LabelMask>,
    spec: &PatchSpec,
    variant: InputVariant,
    norm: NormMethod,
) -> Result<PatchStack> {
    let raw = crop_to_roi(image, roi, spec)?;
    let normed = normalize(&raw, norm)?.patch;
    let prior_patch = match (variant.prior(), prior) {
        (None, _) => None,
        (Some(_), None) => return Err(invalid(format!("variant {variant:?} needs a prior mask"))),
        (Some(target), Some(m)) => {
            if m.scheme != target.scheme() {
                return Err(invalid(format!("variant {variant:?} needs a {:?} prior, got {:?}", target, m.scheme)));
            }
            m.check_aligned(image.dims(), &image.geometry)?;
            Some(crop_mask(m, &normed)?)
        }
    };
    assemble_channels(&normed, prior_patch.as_ref(), variant.channel_mode())
}

/// `[age, psa_density]` with density from the given gland volume.
pub fn clinical_row(record: &CaseRecord, gland_volume_cc: f64) -> Result<Vec<f64>> {
    Ok(vec![record.age, psa_density(record.psa, gland_volume_cc)?])
}

/// Classifier samples for every case, using the reference masks for cropping and priors.
pub fn classifier_samples(
    cases: &[PreparedCase],
    spec: &PatchSpec,
    variant: InputVariant,
    norm: NormMethod,
) -> Result<BTreeMap<String, ClfSample>> {
    let mut out = BTreeMap::new();
    for c in cases {
        let prior = variant.prior().map(|t| c.mask(t));
        let patch = classifier_patch(&c.image, &c.gland, prior, spec, variant, norm)?;
        let clinical = if variant.uses_clinical() { Some(clinical_row(&c.record, gland_volume_cc(&c.gland))?) } else { None };
        out.insert(c.id().to_string(), ClfSample { patch, clinical, high_risk: c.record.risk.is_high() });
    }
    Ok(out)
}
