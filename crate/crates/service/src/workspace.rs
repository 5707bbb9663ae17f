//! Loading stage outputs back from the store and turning cases into model inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use vbiopsy_autograd::ParamStore;
use vbiopsy_core::classifier::{ClassifierConfig, ClassifierState, ClfEpoch, ClfSample, ClinicalStats, RiskPrediction};
use vbiopsy_core::counterfactual::{LossComponents, VaeEpoch, VaeGanConfig, VaeGanState};
use vbiopsy_core::imaging::{LabelMask, LabelScheme};
use vbiopsy_core::nifti;
use vbiopsy_core::phantom::{CaseRecord, CohortSpec, Manifest};
use vbiopsy_core::pipeline::{classifier_patch, clinical_row, PreparedCase};
use vbiopsy_core::segmenter::{gland_volume_cc, largest_component, segment, SegEpoch, SegTarget, SegmenterConfig, SegmenterState};

use crate::config::{MaskSource, PipelineConfig, Stage};
use crate::store::{load_artifact, Store};

pub const DATASET: &str = "dataset";
pub const PREPARED: &str = "prepared";
pub const SEGMENTER: &str = "segmenter";
pub const CLASSIFIER: &str = "classifier";
pub const VAEGAN: &str = "vaegan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub cohort: CohortSpec,
    pub records: Vec<CaseRecord>,
    /// SHA-256 of every case file, keyed by path relative to the run directory.
    pub files: BTreeMap<String, String>,
    /// Hash over `files` and `records`; equal for equal cohorts.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub spacing: [f64; 3],
    pub records: Vec<CaseRecord>,
    pub manifest: Manifest,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmenterArtifact {
    pub config: SegmenterConfig,
    pub curve: Vec<SegEpoch>,
    pub best_epoch: Option<usize>,
    /// Mean foreground DSC on the test split after post-processing.
    pub test_dsc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierArtifact {
    pub config: ClassifierConfig,
    pub clinical_stats: Option<ClinicalStats>,
    pub curve: Vec<ClfEpoch>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeGanArtifact {
    pub config: VaeGanConfig,
    pub initial_val: Option<LossComponents>,
    pub curve: Vec<VaeEpoch>,
    pub best_epoch: Option<usize>,
}

pub fn case_file(id: &str, name: &str) -> String {
    format!("cases/{id}/{name}.nii.gz")
}

/// Combined checksum of a file table and the case records.
pub fn dataset_checksum(files: &BTreeMap<String, String>, records: &[CaseRecord]) -> String {
    let mut text = String::new();
    for (path, sha) in files {
        text.push_str(&format!("{sha}  {path}\n"));
    }
    text.push_str(&serde_json::to_string(records).expect("records serialize"));
    crate::store::sha256_hex(text.as_bytes())
}

pub fn params_blob(params: &ParamStore) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    params.write_blob(&mut buf)?;
    Ok(buf)
}

fn params_from(blob: Option<Vec<u8>>, what: &str) -> anyhow::Result<ParamStore> {
    let blob = blob.with_context(|| format!("{what} has no weights file"))?;
    Ok(ParamStore::read_blob(blob.as_slice())?)
}

/// Reference and working masks for one case.
#[derive(Clone, Debug)]
pub struct CaseMasks {
    pub gland: LabelMask,
    pub zones: Option<LabelMask>,
}

#[derive(Clone, Debug)]
pub struct Segmenters {
    pub gland: SegmenterState,
    pub zones: Option<SegmenterState>,
}

pub struct Workspace {
    pub cfg: PipelineConfig,
    pub store: Store,
}

impl Workspace {
    pub fn open(cfg: PipelineConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let store = Store::open(&cfg.storage_root)?;
        Ok(Self { cfg, store })
    }

    fn stage_dir(&self, stage: Stage) -> anyhow::Result<PathBuf> {
        Ok(self.store.current(stage)?)
    }

    pub fn dataset(&self) -> anyhow::Result<(PathBuf, DatasetIndex)> {
        let dir = self.stage_dir(Stage::Dataset)?;
        let idx = load_artifact(&dir, DATASET, DATASET, &self.cfg.stage_hash(Stage::Dataset))?.payload;
        Ok((dir, idx))
    }

    pub fn prepared(&self) -> anyhow::Result<(Vec<PreparedCase>, Manifest)> {
        let dir = self.stage_dir(Stage::Prepared)?;
        let idx: PreparedIndex = load_artifact(&dir, PREPARED, PREPARED, &self.cfg.stage_hash(Stage::Prepared))?.payload;
        let cases = idx.records.iter().map(|r| read_case(&dir, r)).collect::<anyhow::Result<_>>()?;
        Ok((cases, idx.manifest))
    }

    pub fn segmenters(&self) -> anyhow::Result<Segmenters> {
        let dir = self.stage_dir(Stage::Segmenter)?;
        let hash = self.cfg.stage_hash(Stage::Segmenter);
        let gland = load_segmenter(&dir, "gland", &hash)?;
        let zones = if self.cfg.needs_zones() { Some(load_segmenter(&dir, "zones", &hash)?) } else { None };
        Ok(Segmenters { gland, zones })
    }

    /// Segmenters only when the configured mask source needs them.
    pub fn mask_segmenters(&self) -> anyhow::Result<Option<Segmenters>> {
        match self.cfg.models.mask_source {
            MaskSource::Reference => Ok(None),
            MaskSource::Segmenter => Ok(Some(self.segmenters()?)),
        }
    }

    pub fn ensemble(&self) -> anyhow::Result<Vec<ClassifierState>> {
        let dir = self.stage_dir(Stage::Classifiers)?;
        let hash = self.cfg.stage_hash(Stage::Classifiers);
        (0..self.cfg.models.ensemble.len()).map(|i| load_classifier(&dir, &format!("member-{i}"), &hash)).collect()
    }

    pub fn vaegan(&self) -> anyhow::Result<VaeGanState> {
        let dir = self.stage_dir(Stage::VaeGan)?;
        let a = load_artifact::<VaeGanArtifact>(&dir, VAEGAN, VAEGAN, &self.cfg.stage_hash(Stage::VaeGan))?;
        let params = params_from(a.blob, "vaegan")?;
        let p = a.payload;
        Ok(VaeGanState::from_parts(p.config, &params, p.initial_val, p.curve, p.best_epoch)?)
    }

    pub fn case_masks(&self, case: &PreparedCase, segs: Option<&Segmenters>) -> anyhow::Result<CaseMasks> {
        match segs {
            None => Ok(CaseMasks { gland: case.gland.clone(), zones: Some(case.zones.clone()) }),
            Some(s) => {
                let gland = largest_component(&segment(&case.image, &s.gland, SegTarget::Gland)?);
                if gland.empty {
                    bail!("segmenter found no gland in case {}", case.id());
                }
                let zones = match &s.zones {
                    Some(z) => Some(largest_component(&segment(&case.image, z, SegTarget::Zones)?).mask),
                    None => None,
                };
                Ok(CaseMasks { gland: gland.mask, zones })
            }
        }
    }

    /// The classifier input of one case for one ensemble member.
    pub fn member_sample(&self, case: &PreparedCase, masks: &CaseMasks, member: &ClassifierConfig) -> anyhow::Result<ClfSample> {
        let prior = match member.variant.prior() {
            None => None,
            Some(SegTarget::Gland) => Some(&masks.gland),
            Some(SegTarget::Zones) => Some(masks.zones.as_ref().context("zonal prior requested but no zones mask")?),
        };
        let spec = self.cfg.patch_spec(member);
        let patch = classifier_patch(&case.image, &masks.gland, prior, &spec, member.variant, self.cfg.models.norm)
            .with_context(|| format!("patch for case {}", case.id()))?;
        let clinical = if member.variant.uses_clinical() { Some(clinical_row(&case.record, gland_volume_cc(&masks.gland))?) } else { None };
        Ok(ClfSample { patch, clinical, high_risk: case.record.risk.is_high() })
    }

    /// Inputs for every member, keyed by member index then case id.
    pub fn all_samples(&self, cases: &[PreparedCase], segs: Option<&Segmenters>) -> anyhow::Result<Vec<BTreeMap<String, ClfSample>>> {
        let masks: Vec<CaseMasks> = cases.iter().map(|c| self.case_masks(c, segs)).collect::<anyhow::Result<_>>()?;
        self.cfg
            .models
            .ensemble
            .iter()
            .map(|m| cases.iter().zip(&masks).map(|(c, k)| Ok((c.id().to_string(), self.member_sample(c, k, m)?))).collect())
            .collect()
    }
}

pub fn read_case(dir: &Path, record: &CaseRecord) -> anyhow::Result<PreparedCase> {
    let id = &record.case_id;
    Ok(PreparedCase {
        image: nifti::read_volume(&dir.join(case_file(id, "image")))?,
        gland: nifti::read_mask(&dir.join(case_file(id, "gland")), LabelScheme::Gland)?,
        zones: nifti::read_mask(&dir.join(case_file(id, "zones")), LabelScheme::Zones)?,
        record: record.clone(),
    })
}

pub fn load_segmenter(dir: &Path, name: &str, hash: &str) -> anyhow::Result<SegmenterState> {
    let a = load_artifact::<SegmenterArtifact>(dir, name, SEGMENTER, hash)?;
    let params = params_from(a.blob, name)?;
    let p = a.payload;
    Ok(SegmenterState::from_parts(p.config, &params, p.curve, p.best_epoch)?)
}

pub fn load_classifier(dir: &Path, name: &str, hash: &str) -> anyhow::Result<ClassifierState> {
    let a = load_artifact::<ClassifierArtifact>(dir, name, CLASSIFIER, hash)?;
    let params = params_from(a.blob, name)?;
    let p = a.payload;
    Ok(ClassifierState::from_parts(p.config, &params, p.clinical_stats, p.curve, p.best_epoch)?)
}

/// Member predictions for one case, in ensemble order.
pub fn member_predictions(ensemble: &[ClassifierState], samples: &[BTreeMap<String, ClfSample>], case_id: &str) -> anyhow::Result<Vec<RiskPrediction>> {
    ensemble
        .iter()
        .zip(samples)
        .map(|(st, s)| {
            let sample = s.get(case_id).with_context(|| format!("no input for case {case_id}"))?;
            Ok(st.predict(case_id, &sample.patch, sample.clinical.as_deref())?)
        })
        .collect()
}
