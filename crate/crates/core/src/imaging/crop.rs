use super::{ChannelRole, Grid3, LabelMask, PatchSpec, PatchStack, Volume3D};
use crate::error::{Error, Result};

/// Mean voxel index of all foreground voxels, or `None` for an empty mask.
pub fn mask_centroid(mask: &LabelMask) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in mask.grid.data().iter().enumerate() {
        if v != 0 {
            let c = mask.grid.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Centroid rounded half away from zero on each axis.
pub fn rounded_centroid(mask: &LabelMask) -> Option<[i64; 3]> {
    mask_centroid(mask).map(|c| c.map(|v| v.round() as i64))
}

fn window_start(mask: &LabelMask, size: [usize; 3]) -> Result<[i64; 3]> {
    let c = rounded_centroid(mask).ok_or(Error::NoRoi)?;
    Ok([0, 1, 2].map(|a| c[a] - (size[a] / 2) as i64))
}

fn cut<T: Copy>(grid: &Grid3<T>, start: [i64; 3], size: [usize; 3], fill: T) -> Grid3<T> {
    let mut out = Grid3::filled(size, fill);
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let src = grid.get_checked(start[0] + x as i64, start[1] + y as i64, start[2] + z as i64);
                if let Some(v) = src {
                    out.set(x, y, z, v);
                }
            }
        }
    }
    out
}

/// Cut a `spec.size` window centred on the rounded gland centroid, zero-padding outside the volume.
pub fn crop_to_roi(vol: &Volume3D, gland: &LabelMask, spec: &PatchSpec) -> Result<PatchStack> {
    gland.check_aligned(vol.dims(), &vol.geometry)?;
    let start = window_start(gland, spec.size)?;
    let grid = cut(&vol.grid, start, spec.size, 0.0);
    PatchStack::new(vec![grid], vec![ChannelRole::Image], vol.geometry.spacing, start)
}

/// Cut the same window a patch was taken from out of a mask aligned with the source volume.
pub fn crop_mask(mask: &LabelMask, patch: &PatchStack) -> Result<LabelMask> {
    if !mask.geometry.spacing.iter().zip(&patch.spacing).all(|(a, b)| (a - b).abs() <= 1e-6 * a.max(1.0)) {
        return Err(Error::Geometry(format!(
            "mask spacing {:?} vs patch spacing {:?}",
            mask.geometry.spacing, patch.spacing
        )));
    }
    let grid = cut(&mask.grid, patch.window_origin, patch.dims(), 0u8);
    let mut geometry = mask.geometry;
    for a in 0..3 {
        geometry.origin[a] += patch.window_origin[a] as f64 * geometry.spacing[a];
    }
    LabelMask::new(grid, mask.scheme, geometry)
}
