//! One function per CLI command. Each writes its outputs into a fresh run directory,
//! records a `run.json`, and (for pipeline stages) publishes the run as the stage's current output.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use vbiopsy_core::classifier::{ensemble_predict, train_classifier, ClassifierState, ClfSample};
use vbiopsy_core::counterfactual::{
    generate_counterfactuals, image_tensor, peak_voxel, train_vaegan, ClassifierStack, CounterfactualConfig, CounterfactualJob,
    CounterfactualTrace, HeatmapAggregate, VaeGanState,
};
use vbiopsy_core::imaging::{resample, resample_mask, Geometry, Interpolation};
use vbiopsy_core::metrics::{evaluate_scores, MetricsReport};
use vbiopsy_core::nifti;
use vbiopsy_core::phantom::{build_manifest, generate_cohort};
use vbiopsy_core::pipeline::PreparedCase;
use vbiopsy_core::segmenter::{largest_component, mean_foreground_dice, segment, train_segmenter, SegSample, SegmenterConfig};
use vbiopsy_core::trial::sessions_from_jsonl;

use crate::config::Stage;
use crate::grid::{self, GridSpec};
use crate::store::{sha256_file, sha256_hex, write_atomic, write_json, Run, RunRecord};
use crate::trials::{self, TrialFiles};
use crate::workspace::*;

fn write_case(run: &mut Run, case: &PreparedCase) -> anyhow::Result<BTreeMap<String, String>> {
    let id = case.id();
    let mut files = BTreeMap::new();
    for (name, write) in [
        ("image", Box::new(|p: &Path| nifti::write_volume(p, &case.image)) as Box<dyn Fn(&Path) -> vbiopsy_core::Result<()>>),
        ("gland", Box::new(|p: &Path| nifti::write_mask(p, &case.gland))),
        ("zones", Box::new(|p: &Path| nifti::write_mask(p, &case.zones))),
    ] {
        let rel = case_file(id, name);
        let path = run.dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("case file has a parent"))?;
        write(&path)?;
        files.insert(rel.clone(), sha256_file(&path)?);
        run.output(rel);
    }
    Ok(files)
}

/// Generate the phantom cohort at its native grid.
pub fn phantom_gen(ws: &Workspace) -> anyhow::Result<RunRecord> {
    let cohort = &ws.cfg.data.cohort;
    let mut run = ws.store.begin_run("phantom-gen", &ws.cfg.stage_hash(Stage::Dataset))?;
    run.input("n", cohort.n);
    run.input("seed", cohort.seed);
    let phantoms = generate_cohort(cohort)?;
    let mut files = BTreeMap::new();
    let mut records = Vec::new();
    for p in &phantoms {
        let case = PreparedCase { image: p.volume.clone(), gland: p.gland.clone(), zones: p.zones.clone(), record: p.record.clone() };
        files.extend(write_case(&mut run, &case)?);
        records.push(p.record.clone());
    }
    let checksum = dataset_checksum(&files, &records);
    run.save(DATASET, DATASET, &DatasetIndex { cohort: cohort.clone(), records, files, checksum: checksum.clone() }, None)?;
    let rec = run.finish(json!({ "cases": phantoms.len(), "checksum": checksum }))?;
    ws.store.publish(Stage::Dataset, &rec)?;
    Ok(rec)
}

/// Resample every case to the working grid and fix the train/validation/test split.
pub fn preprocess(ws: &Workspace) -> anyhow::Result<RunRecord> {
    let (src, idx) = ws.dataset()?;
    let spacing = ws.cfg.data.spacing;
    let mut run = ws.store.begin_run("preprocess", &ws.cfg.stage_hash(Stage::Prepared))?;
    run.input("dataset", src.display());
    run.input("dataset_checksum", &idx.checksum);
    let mut files = BTreeMap::new();
    for r in &idx.records {
        let raw = read_case(&src, r)?;
        let case = PreparedCase {
            image: resample(&raw.image, spacing, Interpolation::BSpline)?,
            gland: resample_mask(&raw.gland, spacing)?,
            zones: resample_mask(&raw.zones, spacing)?,
            record: r.clone(),
        };
        files.extend(write_case(&mut run, &case)?);
    }
    let d = &ws.cfg.data;
    let manifest = build_manifest(&idx.records, d.split_ratios, d.stratify, d.split_seed)?;
    let sizes: BTreeMap<_, _> = manifest.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    run.save(PREPARED, PREPARED, &PreparedIndex { spacing, records: idx.records.clone(), manifest, files }, None)?;
    let rec = run.finish(json!({ "splits": sizes }))?;
    ws.store.publish(Stage::Prepared, &rec)?;
    Ok(rec)
}

fn fit_segmenter(run: &mut Run, name: &str, cfg: &SegmenterConfig, cases: &[PreparedCase], manifest: &vbiopsy_core::phantom::Manifest) -> anyhow::Result<f64> {
    let data: BTreeMap<String, SegSample> = cases.iter().map(|c| (c.id().to_string(), c.seg_sample(cfg.target))).collect();
    let state = train_segmenter(&data, manifest, cfg)?;
    let test = manifest.test();
    let mut dsc = 0.0;
    for id in test {
        let s = &data[id];
        let pred = largest_component(&segment(&s.image, &state, cfg.target)?).mask;
        dsc += mean_foreground_dice(&pred, &s.target)?;
    }
    let dsc = if test.is_empty() { None } else { Some(dsc / test.len() as f64) };
    let artifact = SegmenterArtifact { config: state.config.clone(), curve: state.curve.clone(), best_epoch: state.best_epoch, test_dsc: dsc };
    run.save(name, SEGMENTER, &artifact, Some(&params_blob(&state.params)?))?;
    Ok(dsc.unwrap_or(f64::NAN))
}

/// Train the gland segmenter, and the zonal one when a member needs zonal priors.
pub fn train_seg(ws: &Workspace) -> anyhow::Result<RunRecord> {
    let (cases, manifest) = ws.prepared()?;
    let mut run = ws.store.begin_run("train-seg", &ws.cfg.stage_hash(Stage::Segmenter))?;
    run.input("prepared", ws.store.current(Stage::Prepared)?.display());
    let mut summary = json!({ "gland_test_dsc": fit_segmenter(&mut run, "gland", &ws.cfg.models.segmenter, &cases, &manifest)? });
    if ws.cfg.needs_zones() {
        summary["zones_test_dsc"] = json!(fit_segmenter(&mut run, "zones", &ws.cfg.zones_segmenter(), &cases, &manifest)?);
    }
    let rec = run.finish(summary)?;
    ws.store.publish(Stage::Segmenter, &rec)?;
    Ok(rec)
}

fn classifier_artifact(st: &ClassifierState) -> ClassifierArtifact {
    ClassifierArtifact { config: st.config.clone(), clinical_stats: st.clinical_stats.clone(), curve: st.curve.clone(), best_epoch: st.best_epoch }
}

pub fn best_val_auc(st: &ClassifierState) -> Option<f64> {
    st.best_epoch.and_then(|b| st.curve.get(b)).and_then(|e| e.val_auc)
}

/// Train every ensemble member on its own patch scale.
pub fn train_clf(ws: &Workspace) -> anyhow::Result<RunRecord> {
    let (cases, manifest) = ws.prepared()?;
    let segs = ws.mask_segmenters()?;
    let samples = ws.all_samples(&cases, segs.as_ref())?;
    let mut run = ws.store.begin_run("train-clf", &ws.cfg.stage_hash(Stage::Classifiers))?;
    run.input("prepared", ws.store.current(Stage::Prepared)?.display());
    run.input("mask_source", serde_json::to_string(&ws.cfg.models.mask_source)?);
    let mut members = Vec::new();
    for (i, (member, data)) in ws.cfg.models.ensemble.iter().zip(&samples).enumerate() {
        let st = train_classifier(data, &manifest, member)?;
        run.save(&format!("member-{i}"), CLASSIFIER, &classifier_artifact(&st), Some(&params_blob(&st.params)?))?;
        members.push(json!({ "model": member.model_tag(), "val_auc": best_val_auc(&st), "best_epoch": st.best_epoch }));
    }
    let rec = run.finish(json!({ "members": members }))?;
    ws.store.publish(Stage::Classifiers, &rec)?;
    Ok(rec)
}

/// Patches of the explainer member, the VAE-GAN's training data.
pub fn explainer_samples(ws: &Workspace, cases: &[PreparedCase]) -> anyhow::Result<BTreeMap<String, ClfSample>> {
    let segs = ws.mask_segmenters()?;
    let member = &ws.cfg.models.ensemble[ws.cfg.models.explainer];
    cases
        .iter()
        .map(|c| {
            let masks = ws.case_masks(c, segs.as_ref())?;
            Ok((c.id().to_string(), ws.member_sample(c, &masks, member)?))
        })
        .collect()
}

pub fn train_vae(ws: &Workspace) -> anyhow::Result<RunRecord> {
    let (cases, manifest) = ws.prepared()?;
    // the explainer must exist before its inputs are worth modelling
    ws.store.current(Stage::Classifiers)?;
    let samples = explainer_samples(ws, &cases)?;
    let patches = samples.into_iter().map(|(k, v)| (k, v.patch)).collect();
    let mut run = ws.store.begin_run("train-vaegan", &ws.cfg.stage_hash(Stage::VaeGan))?;
    run.input("prepared", ws.store.current(Stage::Prepared)?.display());
    run.input("explainer", ws.cfg.models.explainer);
    let st = train_vaegan(&patches, &manifest, &ws.cfg.models.vaegan)?;
    let artifact = VaeGanArtifact { config: st.config.clone(), initial_val: st.initial_val, curve: st.curve.clone(), best_epoch: st.best_epoch };
    run.save(VAEGAN, VAEGAN, &artifact, Some(&params_blob(&st.params)?))?;
    let best = st.best_epoch.and_then(|b| st.curve.get(b)).and_then(|e| e.val.as_ref()).map(|c| c.reconstruction);
    let rec = run.finish(json!({ "initial_val_l1": st.initial_val.map(|c| c.reconstruction), "best_val_l1": best, "best_epoch": st.best_epoch }))?;
    ws.store.publish(Stage::VaeGan, &rec)?;
    Ok(rec)
}

/// Where a counterfactual job's files live and what they mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub case_id: String,
    pub trace: CounterfactualTrace,
    pub reference: String,
    pub images: Vec<JobImage>,
    pub heatmaps: JobHeatmaps,
    /// Voxel (x, y, z) of the aggregate heatmap's maximum.
    pub peak_voxel: Option<[usize; 3]>,
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobImage {
    pub alpha: f64,
    pub probability: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobHeatmaps {
    pub kind: HeatmapAggregate,
    pub aggregate: String,
    pub sequential: Vec<String>,
}

pub const JOB_KIND: &str = "counterfactual";

pub fn job_id(vae_hash: &str, case_id: &str, cfg: &CounterfactualConfig) -> String {
    let cfg = serde_json::to_string(cfg).expect("counterfactual config serializes");
    sha256_hex(format!("{vae_hash}\0{case_id}\0{cfg}").as_bytes())[..16].to_string()
}

/// Counterfactual settings with an optional alpha schedule override.
pub fn job_config(base: &CounterfactualConfig, alphas: Option<Vec<f64>>) -> anyhow::Result<CounterfactualConfig> {
    let mut cfg = base.clone();
    if let Some(a) = alphas {
        vbiopsy_core::counterfactual::validate_alphas(&a)?;
        cfg.alphas = a;
    }
    Ok(cfg)
}

/// Run the alpha sweep for one case. Fidelity-gate failures come back as the core error.
pub fn compute_job(case_id: &str, sample: &ClfSample, explainer: &ClassifierState, vae: &VaeGanState, cfg: &CounterfactualConfig) -> vbiopsy_core::Result<CounterfactualJob> {
    let stack = ClassifierStack::new(explainer, &sample.patch, sample.clinical.as_deref())?;
    generate_counterfactuals(case_id, &image_tensor(&sample.patch), vae, &stack, cfg)
}

/// Persist a finished job: NIfTI images and heatmaps plus a stamped summary.
pub fn write_job(dir: &Path, job_id: &str, stamp_hash: &str, job: &CounterfactualJob, sample: &ClfSample) -> anyhow::Result<JobSummary> {
    let geometry = Geometry::with_spacing(sample.patch.spacing)?;
    let write = |name: &str, grid: &vbiopsy_core::imaging::Grid3<f64>| -> anyhow::Result<String> {
        let file = format!("{name}.nii.gz");
        nifti::write_grid(&dir.join(&file), grid, &geometry)?;
        Ok(file)
    };
    std::fs::create_dir_all(dir)?;
    let reference = write("reference", sample.patch.image_channel())?;
    let images = job
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(JobImage { alpha: s.alpha, probability: s.probability, file: write(&format!("cf-{i:02}"), &s.image)? }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let h = job.heatmaps(&job.reference().image, HeatmapAggregate::Mean)?;
    let heatmaps = JobHeatmaps {
        kind: h.kind,
        aggregate: write("heatmap-aggregate", &h.aggregate)?,
        sequential: h.sequential.iter().enumerate().map(|(i, g)| write(&format!("heatmap-seq-{i:02}"), g)).collect::<anyhow::Result<_>>()?,
    };
    let summary = JobSummary {
        job_id: job_id.to_string(),
        case_id: job.case_id.clone(),
        trace: job.trace(),
        reference,
        images,
        heatmaps,
        peak_voxel: peak_voxel(&h.aggregate),
        spacing: sample.patch.spacing,
    };
    crate::store::save_artifact(dir, "job", JOB_KIND, stamp_hash, &summary, None)?;
    Ok(summary)
}

pub fn load_job(dir: &Path, stamp_hash: &str) -> anyhow::Result<JobSummary> {
    Ok(crate::store::load_artifact(dir, "job", JOB_KIND, stamp_hash)?.payload)
}

pub fn counterfactual(ws: &Workspace, case_id: &str, alphas: Option<Vec<f64>>) -> anyhow::Result<RunRecord> {
    let vae = ws.vaegan()?;
    let ensemble = ws.ensemble()?;
    let (cases, _) = ws.prepared()?;
    let case = cases.iter().find(|c| c.id() == case_id).with_context(|| format!("unknown case {case_id}"))?;
    let segs = ws.mask_segmenters()?;
    let member = &ws.cfg.models.ensemble[ws.cfg.models.explainer];
    let sample = ws.member_sample(case, &ws.case_masks(case, segs.as_ref())?, member)?;
    let cfg = job_config(&ws.cfg.counterfactual, alphas)?;
    let vae_hash = ws.cfg.stage_hash(Stage::VaeGan);
    let id = job_id(&vae_hash, case_id, &cfg);
    let mut run = ws.store.begin_run("counterfactual", &vae_hash)?;
    run.input("case_id", case_id);
    run.input("alphas", serde_json::to_string(&cfg.alphas)?);
    let job = compute_job(case_id, &sample, &ensemble[ws.cfg.models.explainer], &vae, &cfg)?;
    let summary = write_job(&ws.store.job_dir(&id), &id, &vae_hash, &job, &sample)?;
    write_json(&run.dir.join("job.json"), &summary)?;
    run.output("job.json");
    Ok(run.finish(json!({ "job_id": id, "delta_p": job.fidelity.delta_p, "bounds": job.bounds }))?)
}

/// Stored probabilities and labels `evaluate` scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub case_id: String,
    pub probability: f64,
    pub high_risk: bool,
}

/// Ensemble predictions for the cases of one split.
pub fn ensemble_on_split(ws: &Workspace, split: &str) -> anyhow::Result<Vec<PredictionEntry>> {
    let (cases, manifest) = ws.prepared()?;
    let ids = manifest.splits.get(split).with_context(|| format!("no split named {split:?}"))?;
    let ensemble = ws.ensemble()?;
    let segs = ws.mask_segmenters()?;
    let wanted: Vec<PreparedCase> = cases.into_iter().filter(|c| ids.contains(&c.record.case_id)).collect();
    let samples = ws.all_samples(&wanted, segs.as_ref())?;
    wanted
        .iter()
        .map(|c| {
            let p = ensemble_predict(&member_predictions(&ensemble, &samples, c.id())?)?;
            Ok(PredictionEntry { case_id: c.id().to_string(), probability: p.probability, high_risk: c.record.risk.is_high() })
        })
        .collect()
}

pub fn metrics_for(entries: &[PredictionEntry], threshold: f64) -> anyhow::Result<MetricsReport> {
    if entries.is_empty() {
        bail!("no predictions to evaluate");
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.probability).collect();
    let labels: Vec<bool> = entries.iter().map(|e| e.high_risk).collect();
    Ok(evaluate_scores(&scores, &labels, threshold)?)
}

/// Score stored predictions (or fresh ensemble predictions on `split`) into `metrics.json`.
pub fn evaluate(ws: &Workspace, predictions: Option<&Path>, split: &str) -> anyhow::Result<RunRecord> {
    let entries: Vec<PredictionEntry> = match predictions {
        Some(p) => crate::store::read_json(p)?,
        None => ensemble_on_split(ws, split)?,
    };
    let hash = match predictions {
        Some(p) => sha256_file(p)?,
        None => ws.cfg.stage_hash(Stage::Classifiers),
    };
    let mut run = ws.store.begin_run("evaluate", &hash)?;
    match predictions {
        Some(p) => run.input("predictions", p.display()),
        None => run.input("split", split),
    }
    run.input("threshold", ws.cfg.metrics.threshold);
    let report = metrics_for(&entries, ws.cfg.metrics.threshold)?;
    write_json(&run.dir.join("predictions.json"), &entries)?;
    write_json(&run.dir.join("metrics.json"), &report)?;
    run.output("predictions.json");
    run.output("metrics.json");
    Ok(run.finish(serde_json::to_value(&report)?)?)
}

/// Trial report from stored sessions, or from a JSON-lines session file.
pub fn trial_report(ws: &Workspace, trial_id: &str, sessions_file: Option<&Path>) -> anyhow::Result<RunRecord> {
    let (cases, _) = ws.prepared()?;
    let truth = trials::ground_truth(cases.iter().map(|c| &c.record));
    let sessions = match sessions_file {
        Some(p) => sessions_from_jsonl(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => {
            let files = TrialFiles::new(&ws.store, trial_id, trials::trial_hash(&ws.cfg));
            if !files.exists() {
                bail!("no trial {trial_id:?} under {}", ws.store.root().display());
            }
            files.finalized_sessions()?
        }
    };
    let ai = ai_decisions(ws, &cases)?;
    let bytes = trials::report_bytes(&sessions, &truth, &ai)?;
    let mut run = ws.store.begin_run("trial-report", &trials::trial_hash(&ws.cfg))?;
    run.input("trial_id", trial_id);
    if let Some(p) = sessions_file {
        run.input("sessions", p.display());
    }
    write_atomic(&run.dir.join("report.json"), &bytes)?;
    run.output("report.json");
    Ok(run.finish(json!({ "sessions": sessions.len(), "ai_alone": !ai.is_empty() }))?)
}

/// AI calls at the metrics threshold for every case, or none if no classifiers are trained.
pub fn ai_decisions(ws: &Workspace, cases: &[PreparedCase]) -> anyhow::Result<BTreeMap<String, vbiopsy_core::trial::Decision>> {
    if ws.store.current(Stage::Classifiers).is_err() {
        return Ok(BTreeMap::new());
    }
    let ensemble = ws.ensemble()?;
    let samples = ws.all_samples(cases, ws.mask_segmenters()?.as_ref())?;
    cases
        .iter()
        .map(|c| {
            let p = ensemble_predict(&member_predictions(&ensemble, &samples, c.id())?)?;
            Ok((c.id().to_string(), vbiopsy_core::trial::Decision::from_high(p.probability >= ws.cfg.metrics.threshold)))
        })
        .collect()
}

pub fn grid_search(ws: &Workspace, spec: &GridSpec, member: usize) -> anyhow::Result<RunRecord> {
    grid::run(ws, spec, member)
}
