//! Separable resampling: cubic B-spline for images, nearest neighbour for labels.
//!
//! The first voxel centre (the origin) is kept fixed. Along an axis with `n` voxels at spacing `s`,
//! the output has `max(1, round(n * s / s'))` voxels at spacing `s'`, so it spans the same physical
//! extent. Sample positions are clamped to the input's outer voxel faces `[-0.5, n - 0.5]`.

use serde::{Deserialize, Serialize};

use super::{check_spacing, Geometry, Grid3, LabelMask, Volume3D};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    BSpline,
    Nearest,
}

pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

fn spacing_matches(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

pub fn resample(vol: &Volume3D, target_spacing: [f64; 3], mode: Interpolation) -> Result<Volume3D> {
    check_spacing(vol.geometry.spacing)?;
    check_spacing(target_spacing)?;
    if let Some(i) = vol.grid.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("voxel {:?} before resampling", vol.grid.coords(i))));
    }
    if spacing_matches(vol.geometry.spacing, target_spacing) {
        return Ok(vol.clone());
    }
    let geometry = Geometry { spacing: target_spacing, origin: vol.geometry.origin };
    let grid = match mode {
        Interpolation::BSpline => {
            let mut g = vol.grid.clone();
            for axis in 0..3 {
                g = bspline_axis(&g, axis, vol.geometry.spacing[axis], target_spacing[axis]);
            }
            g
        }
        Interpolation::Nearest => nearest(&vol.grid, vol.geometry.spacing, target_spacing),
    };
    Ok(Volume3D { grid, geometry })
}

/// Nearest-neighbour resampling of a label mask onto `target_spacing`.
pub fn resample_mask(mask: &LabelMask, target_spacing: [f64; 3]) -> Result<LabelMask> {
    check_spacing(mask.geometry.spacing)?;
    check_spacing(target_spacing)?;
    if spacing_matches(mask.geometry.spacing, target_spacing) {
        return Ok(mask.clone());
    }
    Ok(LabelMask {
        grid: nearest(&mask.grid, mask.geometry.spacing, target_spacing),
        scheme: mask.scheme,
        geometry: Geometry { spacing: target_spacing, origin: mask.geometry.origin },
    })
}

fn nearest<T: Copy>(grid: &Grid3<T>, spacing: [f64; 3], target: [f64; 3]) -> Grid3<T> {
    let dims = grid.dims();
    let out = resampled_dims(dims, spacing, target);
    let lookup: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..out[a])
                .map(|i| {
                    let u = i as f64 * target[a] / spacing[a];
                    (u.round().max(0.0) as usize).min(dims[a] - 1)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(out.iter().product());
    for z in 0..out[2] {
        for y in 0..out[1] {
            for x in 0..out[0] {
                data.push(grid.get(lookup[0][x], lookup[1][y], lookup[2][z]));
            }
        }
    }
    Grid3::from_vec(out, data).expect("consistent dims")
}

/// Interpolation coefficients for one line: natural cubic spline in B-spline form.
///
/// Interior rows solve `(c[k-1] + 4 c[k] + c[k+1]) / 6 = f[k]`; the end rows pin `c = f`,
/// which together with point-symmetric extension gives zero curvature at both ends.
fn coefficients(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n <= 2 {
        return f.to_vec();
    }
    // Thomas algorithm on the tridiagonal system.
    let mut diag = vec![1.0; n];
    let mut rhs = f.to_vec();
    let (lower, upper) = (1.0 / 6.0, 1.0 / 6.0);
    for k in 1..n - 1 {
        diag[k] = 4.0 / 6.0;
    }
    let mut cp = vec![0.0; n];
    // Row 0 has no upper coupling.
    cp[0] = 0.0;
    rhs[0] /= diag[0];
    for k in 1..n {
        let (a, c) = if k == n - 1 { (0.0, 0.0) } else { (lower, upper) };
        let m = diag[k] - a * cp[k - 1];
        cp[k] = c / m;
        rhs[k] = (rhs[k] - a * rhs[k - 1]) / m;
    }
    for k in (0..n - 1).rev() {
        rhs[k] -= cp[k] * rhs[k + 1];
    }
    rhs
}

fn extended(c: &[f64], k: i64) -> f64 {
    let last = c.len() as i64 - 1;
    if k < 0 {
        2.0 * c[0] - extended(c, -k)
    } else if k > last {
        2.0 * c[last as usize] - extended(c, 2 * last - k)
    } else {
        c[k as usize]
    }
}

fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

fn eval_line(c: &[f64], u: f64) -> f64 {
    let n = c.len();
    if n == 1 {
        return c[0];
    }
    let u = u.clamp(-0.5, n as f64 - 0.5);
    let k0 = u.floor() as i64;
    (k0 - 1..=k0 + 2).map(|k| extended(c, k) * cubic_bspline(u - k as f64)).sum()
}

fn bspline_axis(grid: &Grid3<f64>, axis: usize, spacing: f64, target: f64) -> Grid3<f64> {
    let dims = grid.dims();
    let mut out_dims = dims;
    out_dims[axis] = ((dims[axis] as f64 * spacing / target).round() as usize).max(1);
    let n = dims[axis];
    let positions: Vec<f64> = (0..out_dims[axis]).map(|i| i as f64 * target / spacing).collect();
    let mut out = Grid3::filled(out_dims, 0.0);
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut line = vec![0.0; n];
    let at = |a: usize, p: usize, q: usize| -> [usize; 3] {
        let mut c = [0; 3];
        c[axis] = a;
        c[o1] = p;
        c[o2] = q;
        c
    };
    for q in 0..dims[o2] {
        for p in 0..dims[o1] {
            for (k, l) in line.iter_mut().enumerate() {
                let c = at(k, p, q);
                *l = grid.get(c[0], c[1], c[2]);
            }
            let coef = coefficients(&line);
            for (i, &u) in positions.iter().enumerate() {
                let c = at(i, p, q);
                out.set(c[0], c[1], c[2], eval_line(&coef, u));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume3D {
        let mut g = Grid3::filled(dims, 0.0);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    g.set(x, y, z, f(x, y, z));
                }
            }
        }
        Volume3D::new(g, Geometry::with_spacing(spacing).unwrap()).unwrap()
    }

    #[test]
    fn identical_spacing_is_identity() {
        let v = vol([5, 4, 3], [0.5, 0.5, 3.0], |x, y, z| (x * 7 + y * 3 + z) as f64);
        assert_eq!(resample(&v, [0.5, 0.5, 3.0], Interpolation::BSpline).unwrap(), v);
    }

    #[test]
    fn coefficients_interpolate_samples() {
        let f = [1.0, -2.0, 0.5, 4.0, 3.0, 3.5];
        let c = coefficients(&f);
        for (k, fk) in f.iter().enumerate() {
            assert!((eval_line(&c, k as f64) - fk).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_is_reproduced_at_midpoints() {
        let v = vol([10, 2, 2], [1.0, 1.0, 1.0], |x, _, _| 3.0 * x as f64 - 1.0);
        let r = resample(&v, [0.5, 1.0, 1.0], Interpolation::BSpline).unwrap();
        assert_eq!(r.dims(), [20, 2, 2]);
        for x in 0..19 {
            let want = 3.0 * (x as f64 * 0.5) - 1.0;
            assert!((r.grid.get(x, 1, 1) - want).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn nearest_emits_input_values() {
        let v = vol([7, 5, 3], [1.0, 1.0, 2.0], |x, y, z| (x + 10 * y + 100 * z) as f64);
        let r = resample(&v, [0.7, 1.3, 1.1], Interpolation::Nearest).unwrap();
        assert!(r.grid.data().iter().all(|val| v.grid.data().contains(val)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = vol([3, 3, 3], [1.0; 3], |_, _, _| 0.0);
        assert!(resample(&v, [0.0, 1.0, 1.0], Interpolation::BSpline).is_err());
        let mut bad = v.clone();
        bad.grid.data_mut()[4] = f64::INFINITY;
        assert!(matches!(resample(&bad, [2.0; 3], Interpolation::BSpline), Err(Error::NonFinite(_))));
    }
}
