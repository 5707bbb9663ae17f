use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vbiopsy_core::classifier::{ClassifierConfig, Family, InputVariant};
use vbiopsy_core::counterfactual::{CounterfactualConfig, VaeGanConfig};
use vbiopsy_core::imaging::{NormMethod, PatchScale, PatchSpec};
use vbiopsy_core::phantom::{CohortSpec, StratifyKey};
use vbiopsy_core::segmenter::{SegTarget, SegmenterConfig};
use vbiopsy_core::trial::DEFAULT_WASHOUT_SECONDS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub cohort: CohortSpec,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    pub stratify: StratifyKey,
    pub split_seed: u64,
    /// Working grid every case is resampled to.
    pub spacing: [f64; 3],
}

/// Where classifier crops and priors come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Masks predicted by the trained segmenters.
    Segmenter,
    /// The phantom's reference masks.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Settings for the gland segmenter; the zonal one reuses them with the zones target.
    pub segmenter: SegmenterConfig,
    pub mask_source: MaskSource,
    pub norm: NormMethod,
    pub ensemble: Vec<ClassifierConfig>,
    /// Ensemble member whose patches and network drive the counterfactuals.
    pub explainer: usize,
    pub vaegan: VaeGanConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Probability at or above which a case is called high risk.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub id: String,
    pub washout_seconds: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub storage_root: PathBuf,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub counterfactual: CounterfactualConfig,
    pub metrics: MetricsConfig,
    pub trial: TrialConfig,
    pub service: ServiceConfig,
}

/// Pipeline stages whose outputs are stamped with a config hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Dataset,
    Prepared,
    Segmenter,
    Classifiers,
    VaeGan,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Prepared => "prepared",
            Stage::Segmenter => "segmenter",
            Stage::Classifiers => "classifiers",
            Stage::VaeGan => "vaegan",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    /// Desk-scale defaults: a three-scale foundation ensemble with gland priors.
    pub fn desk(storage_root: impl Into<PathBuf>) -> Self {
        let ensemble = [PatchScale::S224, PatchScale::S192, PatchScale::S160]
            .into_iter()
            .map(|s| ClassifierConfig::desk(Family::Foundation, InputVariant::Gland, s))
            .collect();
        Self {
            storage_root: storage_root.into(),
            data: DataConfig {
                cohort: CohortSpec { n: 100, ..Default::default() },
                split_ratios: [0.6, 0.2, 0.2],
                stratify: StratifyKey::Risk,
                split_seed: 3,
                spacing: PatchSpec::DESK_SPACING,
            },
            models: ModelsConfig {
                segmenter: SegmenterConfig::default(),
                mask_source: MaskSource::Segmenter,
                norm: NormMethod::Zscore,
                ensemble,
                explainer: 2,
                vaegan: VaeGanConfig::desk(),
            },
            counterfactual: CounterfactualConfig::default(),
            metrics: MetricsConfig { threshold: 0.5 },
            trial: TrialConfig { id: "trial-1".into(), washout_seconds: DEFAULT_WASHOUT_SECONDS },
            service: ServiceConfig { host: "127.0.0.1".into(), port: 8080 },
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let parent = self.storage_root.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ensure!(
            self.storage_root.is_dir() || parent.is_dir(),
            "storage root {} does not exist and neither does its parent",
            self.storage_root.display()
        );
        let r = self.data.split_ratios;
        ensure!(r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9, "split ratios {r:?} must be non-negative and sum to 1");
        ensure!(self.data.cohort.n > 0, "cohort must contain at least one case");
        ensure!(self.data.spacing.iter().all(|&s| s.is_finite() && s > 0.0), "spacing must be positive");
        let m = &self.models;
        m.segmenter.validate().context("segmenter config")?;
        ensure!(m.segmenter.target == SegTarget::Gland, "models.segmenter must target the gland");
        ensure!(m.segmenter.spacing == self.data.spacing, "segmenter spacing must equal data.spacing");
        ensure!(!m.ensemble.is_empty(), "the ensemble needs at least one member");
        for (i, c) in m.ensemble.iter().enumerate() {
            c.validate().with_context(|| format!("ensemble member {i}"))?;
        }
        let Some(explainer) = m.ensemble.get(m.explainer) else {
            bail!("explainer index {} outside an ensemble of {}", m.explainer, m.ensemble.len());
        };
        m.vaegan.validate().context("vaegan config")?;
        ensure!(
            m.vaegan.patch_size == explainer.patch_size,
            "vaegan patch size {:?} differs from the explainer's {:?}",
            m.vaegan.patch_size,
            explainer.patch_size
        );
        vbiopsy_core::counterfactual::validate_alphas(&self.counterfactual.alphas).context("counterfactual alphas")?;
        ensure!((0.0..=1.0).contains(&self.metrics.threshold), "metrics threshold must lie in [0, 1]");
        ensure!(self.trial.washout_seconds >= 0, "washout must be non-negative");
        ensure!(!self.trial.id.is_empty() && !self.trial.id.contains(['/', '\\', '.']), "trial id {:?} is not a plain name", self.trial.id);
        Ok(())
    }

    pub fn patch_spec(&self, member: &ClassifierConfig) -> PatchSpec {
        PatchSpec { scale: member.scale, size: member.patch_size, target_spacing: self.data.spacing }
    }

    /// Whether any member needs a zonal prior, which requires the zonal segmenter.
    pub fn needs_zones(&self) -> bool {
        self.models.ensemble.iter().any(|c| c.variant.prior() == Some(SegTarget::Zones))
    }

    pub fn zones_segmenter(&self) -> SegmenterConfig {
        SegmenterConfig { target: SegTarget::Zones, ..self.models.segmenter.clone() }
    }

    /// Hash of the settings a stage's outputs depend on, including every upstream stage.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let section = match stage {
            Stage::Dataset => serde_json::to_vec(&self.data.cohort),
            Stage::Prepared => serde_json::to_vec(&(&self.data.split_ratios, &self.data.stratify, self.data.split_seed, &self.data.spacing)),
            Stage::Segmenter => serde_json::to_vec(&(&self.models.segmenter, self.needs_zones())),
            Stage::Classifiers => serde_json::to_vec(&(&self.models.mask_source, &self.models.norm, &self.models.ensemble)),
            Stage::VaeGan => serde_json::to_vec(&(self.models.explainer, &self.models.vaegan)),
        }
        .expect("config sections serialize");
        let upstream = match stage {
            Stage::Dataset => String::new(),
            Stage::Prepared => self.stage_hash(Stage::Dataset),
            Stage::Segmenter => self.stage_hash(Stage::Prepared),
            // classifier inputs only depend on the segmenters when they supply the masks
            Stage::Classifiers if self.models.mask_source == MaskSource::Reference => self.stage_hash(Stage::Prepared),
            Stage::Classifiers => self.stage_hash(Stage::Segmenter),
            Stage::VaeGan => self.stage_hash(Stage::Classifiers),
        };
        let mut bytes = upstream.into_bytes();
        bytes.push(b'|');
        bytes.extend_from_slice(stage.name().as_bytes());
        bytes.push(b'|');
        bytes.extend_from_slice(&section);
        sha256_hex(&bytes)
    }

    /// Hash of the whole document.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Apply a `dotted.path=json` override, e.g. `data.cohort.n=40` or `service.port=9000`.
    ///
    /// Values that do not parse as JSON are taken as strings.
    pub fn set(&mut self, assignment: &str) -> anyhow::Result<()> {
        let (path, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        set_path(&mut doc, path, value)?;
        *self = serde_json::from_value(doc).with_context(|| format!("override {path}"))?;
        Ok(())
    }
}

/// Replace the value at a dotted path; every segment must already exist.
/// Numeric segments index into arrays.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> anyhow::Result<()> {
    let mut cur = doc;
    for seg in path.split('.') {
        cur = match cur {
            serde_json::Value::Object(map) => map.get_mut(seg),
            serde_json::Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .with_context(|| format!("unknown key {path:?} (no {seg:?})"))?;
    }
    *cur = value;
    Ok(())
}
