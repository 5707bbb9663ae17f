//! Synthetic prostate phantoms with known anatomy and implanted lesions, plus stratified splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{Geometry, Grid3, LabelMask, LabelScheme, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Nominal gland ellipsoid semi-axes (mm).
    pub gland_semi_axes_mm: [f64; 3],
    /// Relative per-axis jitter of the semi-axes.
    pub semi_axis_jitter: f64,
    /// Maximum displacement of the gland centre from the grid centre, per axis (mm).
    pub center_jitter_mm: f64,
    /// Transition-zone ellipsoid semi-axes as a fraction of the gland's.
    pub tz_fraction: f64,
    /// Anterior (+y) shift of the transition zone as a fraction of the gland's y semi-axis.
    pub tz_shift: f64,
    pub lesion_count: usize,
    pub lesion_radius_mm: (f64, f64),
    /// Relative hypointensity of lesions, in (-1, 0).
    pub lesion_contrast: f64,
    /// Probability that a lesion is centred in the peripheral zone.
    pub pz_lesion_prob: f64,
    /// Lesions at least this large make a case high risk.
    pub high_risk_radius_mm: f64,
    /// Hypointense blobs placed just outside the gland, as dark as a peripheral-zone lesion.
    #[serde(default)]
    pub distractor_count: usize,
    pub background_intensity: f64,
    /// Peripheral-zone intensity; also the reference for lesion contrast.
    pub gland_intensity: f64,
    pub tz_intensity: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [64, 64, 16],
            spacing: [1.25, 1.25, 3.0],
            gland_semi_axes_mm: [22.0, 18.0, 15.0],
            semi_axis_jitter: 0.1,
            center_jitter_mm: 3.0,
            tz_fraction: 0.55,
            tz_shift: 0.25,
            lesion_count: 0,
            lesion_radius_mm: (5.0, 8.0),
            lesion_contrast: -0.8,
            pz_lesion_prob: 0.7,
            high_risk_radius_mm: 6.5,
            distractor_count: 0,
            background_intensity: 100.0,
            gland_intensity: 300.0,
            tz_intensity: 270.0,
            noise_sigma: 15.0,
            rng_seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        Geometry::with_spacing(self.spacing)?;
        if self.dims.contains(&0) {
            return Err(invalid("phantom grid must be >= 1 voxel per axis"));
        }
        if self.gland_semi_axes_mm.iter().any(|a| !(*a > 0.0)) {
            return Err(invalid("gland semi-axes must be > 0"));
        }
        if !(0.0..1.0).contains(&self.semi_axis_jitter) || !(self.center_jitter_mm >= 0.0) {
            return Err(invalid("jitter must be >= 0 (semi-axis jitter < 1)"));
        }
        if !(self.tz_fraction > 0.0 && self.tz_fraction < 1.0) {
            return Err(invalid(format!("tz_fraction {} must lie in (0, 1)", self.tz_fraction)));
        }
        let (rmin, rmax) = self.lesion_radius_mm;
        let minor = self.gland_semi_axes_mm.iter().copied().fold(f64::INFINITY, f64::min) * (1.0 - self.semi_axis_jitter);
        if !(rmin > 0.0 && rmin <= rmax && rmax < minor) {
            return Err(invalid(format!("lesion radius range ({rmin}, {rmax}) must be ordered and below the minor semi-axis {minor}")));
        }
        if !(self.lesion_contrast > -1.0 && self.lesion_contrast < 0.0) {
            return Err(invalid(format!("lesion contrast {} must lie in (-1, 0)", self.lesion_contrast)));
        }
        if !(0.0..=1.0).contains(&self.pz_lesion_prob) {
            return Err(invalid("pz_lesion_prob must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Pz,
    Tz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Centre in voxel coordinates.
    pub center_voxel: [f64; 3],
    pub radius_mm: f64,
    pub zone: Zone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Risk {
    Low,
    High,
}

impl Risk {
    pub fn is_high(self) -> bool {
        self == Risk::High
    }

    pub fn from_ggg(ggg: u8) -> Self {
        if ggg >= 3 {
            Risk::High
        } else {
            Risk::Low
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub volume_ref: String,
    pub age: f64,
    pub psa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psa_density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ggg: Option<u8>,
    pub risk: Risk,
    #[serde(default)]
    pub lesions: Vec<Lesion>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0) || !(self.psa > 0.0) {
            return Err(invalid(format!("case {}: age and psa must be > 0", self.case_id)));
        }
        if let Some(g) = self.ggg {
            if !(1..=5).contains(&g) {
                return Err(invalid(format!("case {}: ggg {g} outside 1..=5", self.case_id)));
            }
            if Risk::from_ggg(g) != self.risk {
                return Err(invalid(format!("case {}: risk disagrees with ggg {g}", self.case_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume3D,
    pub gland: LabelMask,
    pub zones: LabelMask,
    pub record: CaseRecord,
}

fn inside_ellipsoid(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum::<f64>() <= 1.0
}

fn ggg_for(radius: f64, params: &PhantomParams) -> u8 {
    let (rmin, rmax) = params.lesion_radius_mm;
    let thr = params.high_risk_radius_mm;
    if radius >= thr {
        let band = (rmax - thr).max(1e-9) / 3.0;
        3 + (((radius - thr) / band).floor() as u8).min(2)
    } else if radius < rmin + (thr - rmin) / 2.0 {
        1
    } else {
        2
    }
}

/// Generate one phantom. The case id is derived from the seed.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    generate_named(params, &format!("phantom-{:016x}", params.rng_seed))
}

pub fn generate_named(params: &PhantomParams, case_id: &str) -> Result<Phantom> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let dims = params.dims;
    let sp = params.spacing;
    let geometry = Geometry::with_spacing(sp)?;

    let axes = params.gland_semi_axes_mm.map(|a| a * (1.0 + params.semi_axis_jitter * rng.random_range(-1.0..=1.0)));
    let grid_center = [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) * sp[a] / 2.0);
    let center = [0, 1, 2].map(|a| grid_center[a] + params.center_jitter_mm * rng.random_range(-1.0..=1.0));
    let tz_axes = axes.map(|a| a * params.tz_fraction);
    let tz_center = [center[0], center[1] + params.tz_shift * axes[1], center[2]];

    let mm = |x: usize, y: usize, z: usize| [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
    let mut zones = Grid3::filled(dims, 0u8);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = mm(x, y, z);
                if inside_ellipsoid(p, center, axes) {
                    let label = if inside_ellipsoid(p, tz_center, tz_axes) { LabelScheme::TZ } else { LabelScheme::PZ };
                    zones.set(x, y, z, label);
                }
            }
        }
    }
    if zones.data().iter().all(|&v| v == 0) {
        return Err(invalid("gland does not intersect the grid"));
    }

    let mut lesions = Vec::with_capacity(params.lesion_count);
    for _ in 0..params.lesion_count {
        let radius = rng.random_range(params.lesion_radius_mm.0..=params.lesion_radius_mm.1);
        let zone = if rng.random::<f64>() < params.pz_lesion_prob { Zone::Pz } else { Zone::Tz };
        let label = if zone == Zone::Pz { LabelScheme::PZ } else { LabelScheme::TZ };
        let mut candidates: Vec<usize> = (0..zones.len()).filter(|&i| zones.data()[i] == label).collect();
        candidates.shuffle(&mut rng);
        let fits = |c: [usize; 3]| -> bool {
            let r = [0, 1, 2].map(|a| (radius / sp[a]).ceil() as i64);
            for dz in -r[2]..=r[2] {
                for dy in -r[1]..=r[1] {
                    for dx in -r[0]..=r[0] {
                        let d2 = (dx as f64 * sp[0]).powi(2) + (dy as f64 * sp[1]).powi(2) + (dz as f64 * sp[2]).powi(2);
                        if d2 > radius * radius {
                            continue;
                        }
                        let v = zones.get_checked(c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                        if v.is_none_or(|l| l == 0) {
                            return false;
                        }
                    }
                }
            }
            true
        };
        let chosen = candidates.iter().take(2000).map(|&i| zones.coords(i)).find(|&c| fits(c));
        let c = chosen.ok_or_else(|| {
            Error::LesionDoesNotFit(format!("radius {radius:.2} mm in {zone:?} of gland with semi-axes {axes:.1?} mm"))
        })?;
        lesions.push(Lesion { center_voxel: c.map(|v| v as f64), radius_mm: radius, zone });
    }

    let mut distractors: Vec<([f64; 3], f64)> = Vec::with_capacity(params.distractor_count);
    for _ in 0..params.distractor_count {
        let mut placed = None;
        for _ in 0..200 {
            let radius = rng.random_range(params.lesion_radius_mm.0..=params.lesion_radius_mm.1);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let gap = rng.random_range(1.0..8.0);
            let dz = rng.random_range(-0.5..0.5) * axes[2];
            let (cx, cy) = (theta.cos(), theta.sin());
            let rim = 1.0 / ((cx / axes[0]).powi(2) + (cy / axes[1]).powi(2)).sqrt();
            let d = rim + radius + gap;
            let c = [center[0] + d * cx, center[1] + d * cy, center[2] + dz];
            let r = [0, 1, 2].map(|a| (radius / sp[a]).ceil() as i64);
            let cv = [0, 1, 2].map(|a| (c[a] / sp[a]).round() as i64);
            let mut ok = true;
            'scan: for dz in -r[2]..=r[2] {
                for dy in -r[1]..=r[1] {
                    for dx in -r[0]..=r[0] {
                        let p = [cv[0] + dx, cv[1] + dy, cv[2] + dz];
                        let d2: f64 = (0..3).map(|a| (p[a] as f64 * sp[a] - c[a]).powi(2)).sum();
                        if d2 > radius * radius {
                            continue;
                        }
                        if zones.get_checked(p[0], p[1], p[2]) != Some(0) {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                placed = Some((c, radius));
                break;
            }
        }
        distractors.push(placed.ok_or_else(|| invalid("could not place an extra-glandular distractor inside the grid"))?);
    }
    let distractor_intensity = params.gland_intensity * (1.0 + params.lesion_contrast);

    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut image = Grid3::filled(dims, 0.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let label = zones.get(x, y, z);
                let mut v = match label {
                    LabelScheme::PZ => params.gland_intensity,
                    LabelScheme::TZ => params.tz_intensity,
                    _ => params.background_intensity,
                };
                let p = mm(x, y, z);
                let in_lesion = lesions.iter().any(|l| {
                    let c = [0, 1, 2].map(|a| l.center_voxel[a] * sp[a]);
                    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= l.radius_mm * l.radius_mm
                });
                if in_lesion && label != 0 {
                    v += params.lesion_contrast * params.gland_intensity;
                }
                if label == 0 && distractors.iter().any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r) {
                    v = distractor_intensity;
                }
                image.set(x, y, z, v + noise.sample(&mut rng));
            }
        }
    }

    let age: f64 = Normal::<f64>::new(68.0, 7.0).expect("valid").sample(&mut rng).clamp(40.0, 95.0);
    let max_radius = lesions.iter().map(|l| l.radius_mm).fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let ggg = max_radius.map(|r| ggg_for(r, params));
    let risk = ggg.map_or(Risk::Low, Risk::from_ggg);
    let psa_median: f64 = if risk.is_high() { 9.0 } else { 6.5 };
    let psa = (psa_median.ln() + 0.5 * Normal::new(0.0, 1.0).expect("valid").sample(&mut rng)).exp();

    let record = CaseRecord {
        case_id: case_id.to_string(),
        volume_ref: format!("{case_id}.nii.gz"),
        age,
        psa,
        psa_density: None,
        ggg,
        risk,
        lesions,
    };
    let zones = LabelMask::new(zones, LabelScheme::Zones, geometry)?;
    Ok(Phantom {
        volume: Volume3D::new(image, geometry)?,
        gland: zones.to_gland(),
        zones,
        record,
    })
}

/// Recipe for a labelled phantom cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    /// Fraction of high-risk cases.
    pub prevalence: f64,
    /// Probability that a low-risk case carries a small (sub-threshold) lesion.
    pub low_risk_lesion_prob: f64,
    pub base: PhantomParams,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n: 80,
            prevalence: 0.5,
            low_risk_lesion_prob: 0.0,
            base: PhantomParams { distractor_count: 2, ..PhantomParams::default() },
            seed: 7,
        }
    }
}

pub fn case_id(i: usize) -> String {
    format!("phantom-{i:04}")
}

/// Parameters of the `i`-th case of a cohort.
pub fn cohort_params(spec: &CohortSpec, i: usize) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64 + 1);
    let n_high = (spec.n as f64 * spec.prevalence).round() as usize;
    let mut p = spec.base.clone();
    p.rng_seed = rng.random();
    let (rmin, rmax) = spec.base.lesion_radius_mm;
    let thr = spec.base.high_risk_radius_mm;
    // Cases are interleaved so any prefix of the cohort is mixed.
    let high = (i * n_high) / spec.n.max(1) != ((i + 1) * n_high) / spec.n.max(1);
    if high {
        p.lesion_count = 1;
        p.lesion_radius_mm = (thr.max(rmin), rmax);
    } else if rng.random::<f64>() < spec.low_risk_lesion_prob {
        p.lesion_count = 1;
        p.lesion_radius_mm = (rmin, (thr - 1e-6).max(rmin));
    } else {
        p.lesion_count = 0;
    }
    p
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Phantom>> {
    if !(0.0..=1.0).contains(&spec.prevalence) || !(0.0..=1.0).contains(&spec.low_risk_lesion_prob) {
        return Err(invalid("prevalence and low_risk_lesion_prob must lie in [0, 1]"));
    }
    (0..spec.n).map(|i| generate_named(&cohort_params(spec, i), &case_id(i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyKey {
    Risk,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
    pub ratios: Vec<f64>,
    pub stratify_by: StratifyKey,
    #[serde(default)]
    pub seed: u64,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl Manifest {
    pub fn split(&self, name: &str) -> &[String] {
        self.splits.get(name).map_or(&[], |v| v.as_slice())
    }

    pub fn train(&self) -> &[String] {
        self.split("train")
    }

    pub fn val(&self) -> &[String] {
        self.split("val")
    }

    pub fn test(&self) -> &[String] {
        self.split("test")
    }

    pub fn all_ids(&self) -> Vec<&String> {
        self.splits.values().flatten().collect()
    }

    /// Manifest with explicit split lists.
    pub fn from_splits(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Self {
        let n = (train.len() + val.len() + test.len()).max(1) as f64;
        let ratios = vec![train.len() as f64 / n, val.len() as f64 / n, test.len() as f64 / n];
        let splits = BTreeMap::from([("train".into(), train), ("val".into(), val), ("test".into(), test)]);
        Self { splits, ratios, stratify_by: StratifyKey::None, seed: 0 }
    }
}

/// Integer apportionment of `total` by `weights` (largest remainder, ties to the lower index).
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - out[a] as f64, exact[b] - out[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

pub fn build_manifest(cases: &[CaseRecord], ratios: [f64; 3], stratify_by: StratifyKey, seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|r| !(*r > 0.0)) || ((ratios.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    if cases.len() < ratios.len() {
        return Err(invalid(format!("{} cases cannot fill {} splits", cases.len(), ratios.len())));
    }
    let mut ids: Vec<&CaseRecord> = cases.iter().collect();
    ids.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if ids.windows(2).any(|w| w[0].case_id == w[1].case_id) {
        return Err(invalid("duplicate case ids"));
    }
    let sizes = apportion(cases.len(), &ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: Vec<Vec<String>> = vec![Vec::new(); 3];
    match stratify_by {
        StratifyKey::None => {
            let mut all: Vec<String> = ids.iter().map(|c| c.case_id.clone()).collect();
            all.shuffle(&mut rng);
            let mut it = all.into_iter();
            for (s, &n) in splits.iter_mut().zip(&sizes) {
                s.extend(it.by_ref().take(n));
            }
        }
        StratifyKey::Risk => {
            let (mut pos, mut neg): (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
            for c in &ids {
                if c.risk.is_high() {
                    pos.push(c.case_id.clone());
                } else {
                    neg.push(c.case_id.clone());
                }
            }
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
            let pos_quota = apportion(pos.len(), &weights);
            let (mut pi, mut ni) = (pos.into_iter(), neg.into_iter());
            for ((s, &n), &p) in splits.iter_mut().zip(&sizes).zip(&pos_quota) {
                s.extend(pi.by_ref().take(p));
                s.extend(ni.by_ref().take(n - p));
            }
        }
    }
    let splits = SPLIT_NAMES.iter().map(|s| s.to_string()).zip(splits).collect();
    Ok(Manifest { splits, ratios: ratios.to_vec(), stratify_by, seed })
}
