//! Exhaustive hyperparameter search over one ensemble member's classifier config.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vbiopsy_core::classifier::{train_classifier, ClassifierConfig};
use vbiopsy_core::metrics::MetricsReport;

use crate::commands::{metrics_for, PredictionEntry};
use crate::config::{set_path, Stage};
use crate::store::{sha256_hex, write_json, RunRecord};
use crate::workspace::{params_blob, ClassifierArtifact, Workspace, CLASSIFIER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CompositeScore,
    Auc,
}

/// Candidate values per parameter. Keys are dotted paths into the classifier config,
/// e.g. `learning_rate`, `optimizer.weight_decay`, `loss.pos_weight` or `epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub parameters: BTreeMap<String, Vec<Value>>,
    pub objective: Objective,
}

pub type Combination = BTreeMap<String, Value>;

impl GridSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.parameters.is_empty(), "grid has no parameters");
        for (k, v) in &self.parameters {
            ensure!(!v.is_empty(), "parameter {k:?} has no candidate values");
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.parameters.values().map(Vec::len).product()
    }

    /// Every combination once, in odometer order with the last key varying fastest.
    pub fn combinations(&self) -> Vec<Combination> {
        let keys: Vec<&String> = self.parameters.keys().collect();
        let lists: Vec<&Vec<Value>> = self.parameters.values().collect();
        if lists.iter().any(|l| l.is_empty()) {
            return Vec::new();
        }
        let mut idx = vec![0usize; keys.len()];
        let mut out = Vec::with_capacity(self.size());
        loop {
            out.push(keys.iter().zip(&lists).zip(&idx).map(|((k, l), &i)| ((*k).clone(), l[i].clone())).collect());
            let mut a = keys.len();
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < lists[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

/// `base` with the combination's values written in; the result must still validate.
pub fn apply(base: &ClassifierConfig, combo: &Combination) -> anyhow::Result<ClassifierConfig> {
    let mut doc = serde_json::to_value(base)?;
    for (path, v) in combo {
        set_path(&mut doc, path, v.clone())?;
    }
    let cfg: ClassifierConfig = serde_json::from_value(doc).with_context(|| format!("grid point {combo:?}"))?;
    cfg.validate().with_context(|| format!("grid point {combo:?}"))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub parameters: Combination,
    pub config_hash: String,
    pub objective: Objective,
    /// Objective on the validation split.
    pub value: f64,
    pub val_metrics: MetricsReport,
    pub best_epoch: Option<usize>,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub objective: Objective,
    pub member: usize,
    pub points: Vec<GridPoint>,
    /// Index of the best point; ties go to the earliest.
    pub best: usize,
}

fn objective_value(m: &MetricsReport, objective: Objective) -> anyhow::Result<f64> {
    match objective {
        Objective::Auc => m.auc,
        Objective::CompositeScore => m.composite_score,
    }
    .context("objective is undefined on the validation split (needs both classes)")
}

pub fn run(ws: &Workspace, spec: &GridSpec, member: usize) -> anyhow::Result<RunRecord> {
    spec.validate()?;
    let base = ws.cfg.models.ensemble.get(member).with_context(|| format!("no ensemble member {member}"))?;
    let combos = spec.combinations();
    let configs: Vec<ClassifierConfig> = combos.iter().map(|c| apply(base, c)).collect::<anyhow::Result<_>>()?;
    let (cases, manifest) = ws.prepared()?;
    let segs = ws.mask_segmenters()?;
    let masks: Vec<_> = cases.iter().map(|c| ws.case_masks(c, segs.as_ref())).collect::<anyhow::Result<_>>()?;

    let grid_hash = sha256_hex(format!("{}|{}|{member}", ws.cfg.stage_hash(Stage::Classifiers), serde_json::to_string(spec)?).as_bytes());
    let mut run = ws.store.begin_run("grid-search", &grid_hash)?;
    run.input("member", member);
    run.input("grid", serde_json::to_string(spec)?);
    let mut points = Vec::with_capacity(configs.len());
    let mut best: Option<(usize, f64, ClassifierArtifact, Vec<u8>)> = None;
    for (index, (combo, cfg)) in combos.into_iter().zip(configs).enumerate() {
        let t = Instant::now();
        let data = cases
            .iter()
            .zip(&masks)
            .map(|(c, m)| Ok((c.id().to_string(), ws.member_sample(c, m, &cfg)?)))
            .collect::<anyhow::Result<BTreeMap<_, _>>>()?;
        let st = train_classifier(&data, &manifest, &cfg)?;
        let val: Vec<PredictionEntry> = manifest
            .val()
            .iter()
            .map(|id| {
                let s = &data[id];
                Ok(PredictionEntry { case_id: id.clone(), probability: st.predict(id, &s.patch, s.clinical.as_deref())?.probability, high_risk: s.high_risk })
            })
            .collect::<anyhow::Result<_>>()?;
        let val_metrics = metrics_for(&val, cfg.threshold)?;
        let value = objective_value(&val_metrics, spec.objective)?;
        let point = GridPoint {
            index,
            parameters: combo,
            config_hash: sha256_hex(&serde_json::to_vec(&cfg)?),
            objective: spec.objective,
            value,
            val_metrics,
            best_epoch: st.best_epoch,
            wall_time_seconds: t.elapsed().as_secs_f64(),
        };
        let rel = format!("point-{index:03}/run.json");
        write_json(&run.dir.join(&rel), &point)?;
        run.output(rel);
        if best.as_ref().is_none_or(|b| value > b.1) {
            let artifact = ClassifierArtifact { config: cfg, clinical_stats: st.clinical_stats.clone(), curve: st.curve.clone(), best_epoch: st.best_epoch };
            best = Some((index, value, artifact, params_blob(&st.params)?));
        }
        points.push(point);
    }
    let (best_index, best_value, artifact, blob) = best.context("grid produced no points")?;
    run.save("best", CLASSIFIER, &artifact, Some(&blob))?;
    let result = GridResult { objective: spec.objective, member, points, best: best_index };
    write_json(&run.dir.join("grid.json"), &result)?;
    run.output("grid.json");
    Ok(run.finish(json!({ "points": result.points.len(), "best": best_index, "value": best_value }))?)
}
