use serde::{Deserialize, Serialize};

use super::{ChannelRole, Grid3, PatchStack};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    /// Per-channel zero mean, unit standard deviation.
    Zscore,
    /// Map the 1st..99th percentile range to [0, 1] and clip.
    Pminmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub patch: PatchStack,
    /// Image channels that had no spread and were replaced with zeros.
    pub degenerate: Vec<usize>,
}

/// Percentile with linear interpolation between order statistics of `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn zscore(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return None;
    }
    Some(values.iter().map(|v| (v - mean) / std).collect())
}

fn pminmax(values: &[f64]) -> Option<Vec<f64>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 1.0), percentile(&sorted, 99.0));
    if hi - lo <= 0.0 {
        return None;
    }
    Some(values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

pub fn normalize(patch: &PatchStack, method: NormMethod) -> Result<Normalized> {
    let mut channels = Vec::with_capacity(patch.num_channels());
    let mut degenerate = Vec::new();
    for (i, (c, role)) in patch.channels().iter().zip(patch.roles()).enumerate() {
        if *role == ChannelRole::Prior {
            channels.push(c.clone());
            continue;
        }
        if c.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image channel {i}")));
        }
        let out = match method {
            NormMethod::Zscore => zscore(c.data()),
            NormMethod::Pminmax => pminmax(c.data()),
        };
        let data = out.unwrap_or_else(|| {
            degenerate.push(i);
            vec![0.0; c.len()]
        });
        channels.push(Grid3::from_vec(c.dims(), data)?);
    }
    let patch = PatchStack::new(channels, patch.roles().to_vec(), patch.spacing, patch.window_origin)?;
    Ok(Normalized { patch, degenerate })
}
