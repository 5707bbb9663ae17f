//! Random training augmentation over multi-channel patches.
//!
//! Transforms run in a fixed order. Every transform consumes the same random draws whether or not
//! it fires, so the stream seen by later transforms never depends on earlier outcomes. Spatial
//! transforms move every channel with identical parameters (linear interpolation for image
//! channels, nearest neighbour for priors); intensity transforms touch image channels only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ChannelRole, Grid3, PatchStack};
use crate::error::{invalid, Result};

/// Probability plus a closed parameter interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeTransform {
    pub prob: f64,
    pub range: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub prob: f64,
    /// Maximum in-plane rotation about the z axis (radians).
    pub rotate_z: f64,
    /// Maximum magnitude of the xy, xz and yx shear coefficients.
    pub shear: [f64; 3],
    /// Maximum relative scale change per axis.
    pub scale: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub prob: f64,
    pub mean: f64,
    /// Upper bound of the per-draw noise standard deviation.
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasFieldParams {
    pub prob: f64,
    pub coeff_range: (f64, f64),
    pub degree: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub zoom: RangeTransform,
    pub affine: AffineParams,
    pub flip: RangeTransform,
    /// Axes a fired flip reverses (0 = x, 1 = y, 2 = z).
    pub flip_axes: Vec<usize>,
    pub gaussian_noise: NoiseParams,
    /// Per-axis smoothing sigma range in voxels.
    pub gaussian_smooth: RangeTransform,
    /// Multiplicative intensity factor range.
    pub scale_intensity: RangeTransform,
    /// Gamma range of the contrast adjustment.
    pub contrast: RangeTransform,
    pub bias_field: BiasFieldParams,
    /// Fraction of k-space discarded.
    pub gibbs: RangeTransform,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            zoom: RangeTransform { prob: 0.2, range: (0.9, 1.1) },
            affine: AffineParams {
                prob: 0.5,
                rotate_z: std::f64::consts::PI / 15.0,
                shear: [0.1; 3],
                scale: [0.1; 3],
            },
            flip: RangeTransform { prob: 0.2, range: (0.0, 0.0) },
            flip_axes: vec![0],
            gaussian_noise: NoiseParams { prob: 0.1, mean: 0.0, std: 0.1 },
            gaussian_smooth: RangeTransform { prob: 0.1, range: (0.5, 1.0) },
            scale_intensity: RangeTransform { prob: 0.2, range: (0.8, 1.2) },
            contrast: RangeTransform { prob: 0.2, range: (0.8, 1.2) },
            bias_field: BiasFieldParams { prob: 0.1, coeff_range: (0.1, 0.2), degree: 3 },
            gibbs: RangeTransform { prob: 0.1, range: (0.6, 0.8) },
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn disabled(rng_seed: u64) -> Self {
        let mut cfg = Self { rng_seed, ..Self::default() };
        cfg.set_all_probs(0.0);
        cfg
    }

    pub fn set_all_probs(&mut self, p: f64) {
        self.zoom.prob = p;
        self.affine.prob = p;
        self.flip.prob = p;
        self.gaussian_noise.prob = p;
        self.gaussian_smooth.prob = p;
        self.scale_intensity.prob = p;
        self.contrast.prob = p;
        self.bias_field.prob = p;
        self.gibbs.prob = p;
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("zoom", self.zoom.prob),
            ("affine", self.affine.prob),
            ("flip", self.flip.prob),
            ("gaussian_noise", self.gaussian_noise.prob),
            ("gaussian_smooth", self.gaussian_smooth.prob),
            ("scale_intensity", self.scale_intensity.prob),
            ("contrast", self.contrast.prob),
            ("bias_field", self.bias_field.prob),
            ("gibbs", self.gibbs.prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let ranges = [
            ("zoom", self.zoom.range, 1e-6, f64::INFINITY),
            ("gaussian_smooth", self.gaussian_smooth.range, 0.0, f64::INFINITY),
            ("scale_intensity", self.scale_intensity.range, 0.0, f64::INFINITY),
            ("contrast", self.contrast.range, 1e-6, f64::INFINITY),
            ("bias_field", self.bias_field.coeff_range, f64::NEG_INFINITY, f64::INFINITY),
            ("gibbs", self.gibbs.range, 0.0, 1.0),
        ];
        for (name, (lo, hi), min, max) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(format!("{name} range ({lo}, {hi}) is not ordered")));
            }
            if lo < min || hi > max {
                return Err(invalid(format!("{name} range ({lo}, {hi}) outside [{min}, {max}]")));
            }
        }
        let a = &self.affine;
        let nonneg = [a.rotate_z, a.shear[0], a.shear[1], a.shear[2], a.scale[0], a.scale[1], a.scale[2]];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) || a.scale.iter().any(|s| *s >= 1.0) {
            return Err(invalid("affine ranges must be finite, >= 0, and scale < 1"));
        }
        if !(self.gaussian_noise.std >= 0.0 && self.gaussian_noise.std.is_finite() && self.gaussian_noise.mean.is_finite()) {
            return Err(invalid("noise std must be finite and >= 0"));
        }
        if self.flip_axes.iter().any(|&ax| ax > 2) {
            return Err(invalid("flip axes must be 0, 1 or 2"));
        }
        if self.bias_field.degree > 6 {
            return Err(invalid("bias field degree must be <= 6"));
        }
        Ok(())
    }
}

/// Geometric transform applied identically to all channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SpatialOp {
    /// Isotropic zoom about the patch centre, output size unchanged.
    Zoom { factor: f64 },
    /// Output voxel `p` samples input at `inverse * (p - c) + c`.
    Affine { inverse: [[f64; 3]; 3] },
    Flip { axis: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum AppliedTransform {
    Spatial(SpatialOp),
    GaussianNoise { std: f64 },
    GaussianSmooth { sigma: [f64; 3] },
    ScaleIntensity { factor: f64 },
    Contrast { gamma: f64 },
    BiasField { coeffs: Vec<f64> },
    Gibbs { alpha: f64 },
}

impl AppliedTransform {
    pub fn is_spatial(&self) -> bool {
        matches!(self, Self::Spatial(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub patch: PatchStack,
    /// Transforms that fired, in application order.
    pub applied: Vec<AppliedTransform>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    uniform(rng, (-max, max))
}

fn invert3(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(invalid("singular affine transform"));
    }
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Ok(inv)
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn sample_linear(grid: &Grid3<f64>, p: [f64; 3]) -> f64 {
    let d = grid.dims();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = p[a].floor();
        base[a] = f as i64;
        frac[a] = p[a] - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            idx[a] = base[a] + off[a] as i64;
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < d[a]) {
            acc += w * grid.get(idx[0] as usize, idx[1] as usize, idx[2] as usize);
        }
    }
    acc
}

fn sample_nearest(grid: &Grid3<f64>, p: [f64; 3]) -> f64 {
    grid.get_checked(p[0].round() as i64, p[1].round() as i64, p[2].round() as i64).unwrap_or(0.0)
}

/// Apply one spatial op to a grid; `nearest` selects nearest-neighbour sampling.
pub fn apply_spatial(grid: &Grid3<f64>, op: &SpatialOp, nearest: bool) -> Grid3<f64> {
    let d = grid.dims();
    if let SpatialOp::Flip { axis } = op {
        let mut out = grid.clone();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let mut s = [x, y, z];
                    s[*axis] = d[*axis] - 1 - s[*axis];
                    out.set(x, y, z, grid.get(s[0], s[1], s[2]));
                }
            }
        }
        return out;
    }
    let inverse = match op {
        SpatialOp::Zoom { factor } => {
            let f = 1.0 / factor;
            [[f, 0.0, 0.0], [0.0, f, 0.0], [0.0, 0.0, f]]
        }
        SpatialOp::Affine { inverse } => *inverse,
        SpatialOp::Flip { .. } => unreachable!(),
    };
    let c = d.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out = Grid3::filled(d, 0.0);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let q = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let mut src = [0.0; 3];
                for r in 0..3 {
                    src[r] = inverse[r][0] * q[0] + inverse[r][1] * q[1] + inverse[r][2] * q[2] + c[r];
                }
                let v = if nearest { sample_nearest(grid, src) } else { sample_linear(grid, src) };
                out.set(x, y, z, v);
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn smooth(grid: &Grid3<f64>, sigma: [f64; 3]) -> Grid3<f64> {
    let mut cur = grid.clone();
    let d = grid.dims();
    for axis in 0..3 {
        let k = gaussian_kernel(sigma[axis]);
        let r = (k.len() / 2) as i64;
        let mut out = cur.clone();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let p = [x, y, z];
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        let mut s = p.map(|v| v as i64);
                        s[axis] = (s[axis] + j as i64 - r).clamp(0, d[axis] as i64 - 1);
                        acc += w * cur.get(s[0] as usize, s[1] as usize, s[2] as usize);
                    }
                    out.set(x, y, z, acc);
                }
            }
        }
        cur = out;
    }
    cur
}

fn legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

fn bias_terms(degree: usize) -> Vec<[usize; 3]> {
    let mut t = Vec::new();
    for i in 0..=degree {
        for j in 0..=degree - i {
            for k in 0..=degree - i - j {
                t.push([i, j, k]);
            }
        }
    }
    t
}

fn bias_field(grid: &Grid3<f64>, degree: usize, coeffs: &[f64]) -> Grid3<f64> {
    let d = grid.dims();
    let coord = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let terms = bias_terms(degree);
    let mut out = grid.clone();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = [coord(x, d[0]), coord(y, d[1]), coord(z, d[2])];
                let field: f64 = terms
                    .iter()
                    .zip(coeffs)
                    .map(|(t, c)| c * legendre(t[0], p[0]) * legendre(t[1], p[1]) * legendre(t[2], p[2]))
                    .sum();
                let i = out.index(x, y, z);
                out.data_mut()[i] *= field.exp();
            }
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [Complex<f64>], nx: usize, ny: usize, inverse: bool) {
    let row = if inverse { planner.plan_fft_inverse(nx) } else { planner.plan_fft_forward(nx) };
    for r in buf.chunks_exact_mut(nx) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(ny) } else { planner.plan_fft_forward(ny) };
    let mut tmp = vec![Complex::new(0.0, 0.0); ny];
    for x in 0..nx {
        for y in 0..ny {
            tmp[y] = buf[x + nx * y];
        }
        col.process(&mut tmp);
        for y in 0..ny {
            buf[x + nx * y] = tmp[y];
        }
    }
}

/// Ringing from truncating each slice's k-space to a centred disc.
fn gibbs(grid: &Grid3<f64>, alpha: f64) -> Grid3<f64> {
    let [nx, ny, nz] = grid.dims();
    let mut planner = FftPlanner::new();
    let radius = (1.0 - alpha) * ((nx * nx + ny * ny) as f64).sqrt() / 2.0;
    let mut out = grid.clone();
    let freq = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for z in 0..nz {
        let slice = &grid.data()[z * nx * ny..(z + 1) * nx * ny];
        let mut buf: Vec<Complex<f64>> = slice.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut planner, &mut buf, nx, ny, false);
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy) = (freq(x, nx), freq(y, ny));
                if (fx * fx + fy * fy).sqrt() > radius {
                    buf[x + nx * y] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut planner, &mut buf, nx, ny, true);
        let scale = 1.0 / (nx * ny) as f64;
        for (o, c) in out.data_mut()[z * nx * ny..(z + 1) * nx * ny].iter_mut().zip(&buf) {
            *o = c.re * scale;
        }
    }
    out
}

fn contrast(grid: &Grid3<f64>, gamma: f64) -> Grid3<f64> {
    let (min, max) = grid.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = max - min;
    grid.map(|v| ((v - min) / (range + 1e-7)).powf(gamma) * range + min)
}

/// Apply the configured random transforms. Pure in `(patch, cfg)`.
pub fn augment(patch: &PatchStack, cfg: &AugmentationConfig) -> Result<Augmented> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut applied = Vec::new();

    // Spatial stage.
    let fire = rng.random::<f64>() < cfg.zoom.prob;
    let factor = uniform(&mut rng, cfg.zoom.range);
    if fire {
        applied.push(AppliedTransform::Spatial(SpatialOp::Zoom { factor }));
    }

    let fire = rng.random::<f64>() < cfg.affine.prob;
    let theta = symmetric(&mut rng, cfg.affine.rotate_z);
    let shear = cfg.affine.shear.map(|s| symmetric(&mut rng, s));
    let scale = cfg.affine.scale.map(|s| 1.0 + symmetric(&mut rng, s));
    if fire {
        let (s, c) = theta.sin_cos();
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let sh = [[1.0, shear[0], shear[1]], [shear[2], 1.0, 0.0], [0.0, 0.0, 1.0]];
        let sc = [[scale[0], 0.0, 0.0], [0.0, scale[1], 0.0], [0.0, 0.0, scale[2]]];
        let forward = matmul3(rot, matmul3(sh, sc));
        applied.push(AppliedTransform::Spatial(SpatialOp::Affine { inverse: invert3(forward)? }));
    }

    let fire = rng.random::<f64>() < cfg.flip.prob;
    if fire {
        for &axis in &cfg.flip_axes {
            applied.push(AppliedTransform::Spatial(SpatialOp::Flip { axis }));
        }
    }

    // Intensity stage.
    let fire = rng.random::<f64>() < cfg.gaussian_noise.prob;
    let std = uniform(&mut rng, (0.0, cfg.gaussian_noise.std));
    let noise_seed: u64 = rng.random();
    if fire {
        applied.push(AppliedTransform::GaussianNoise { std });
    }

    let fire = rng.random::<f64>() < cfg.gaussian_smooth.prob;
    let sigma = [0; 3].map(|_| uniform(&mut rng, cfg.gaussian_smooth.range));
    if fire {
        applied.push(AppliedTransform::GaussianSmooth { sigma });
    }

    let fire = rng.random::<f64>() < cfg.scale_intensity.prob;
    let factor = uniform(&mut rng, cfg.scale_intensity.range);
    if fire {
        applied.push(AppliedTransform::ScaleIntensity { factor });
    }

    let fire = rng.random::<f64>() < cfg.contrast.prob;
    let gamma = uniform(&mut rng, cfg.contrast.range);
    if fire {
        applied.push(AppliedTransform::Contrast { gamma });
    }

    let fire = rng.random::<f64>() < cfg.bias_field.prob;
    let coeffs: Vec<f64> =
        (0..bias_terms(cfg.bias_field.degree).len()).map(|_| uniform(&mut rng, cfg.bias_field.coeff_range)).collect();
    if fire {
        applied.push(AppliedTransform::BiasField { coeffs });
    }

    let fire = rng.random::<f64>() < cfg.gibbs.prob;
    let alpha = uniform(&mut rng, cfg.gibbs.range);
    if fire {
        applied.push(AppliedTransform::Gibbs { alpha });
    }

    let (mut channels, roles, spacing, origin) = patch.clone().into_parts();
    for t in &applied {
        for (ch, role) in channels.iter_mut().zip(&roles) {
            let is_image = *role == ChannelRole::Image;
            *ch = match t {
                AppliedTransform::Spatial(op) => apply_spatial(ch, op, !is_image),
                _ if !is_image => continue,
                AppliedTransform::GaussianNoise { std } => {
                    let normal = Normal::new(cfg.gaussian_noise.mean, *std).map_err(|e| invalid(e.to_string()))?;
                    // Same noise realisation for every image channel.
                    let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
                    ch.map(|v| v + normal.sample(&mut nrng))
                }
                AppliedTransform::GaussianSmooth { sigma } => smooth(ch, *sigma),
                AppliedTransform::ScaleIntensity { factor } => ch.map(|v| v * factor),
                AppliedTransform::Contrast { gamma } => contrast(ch, *gamma),
                AppliedTransform::BiasField { coeffs } => bias_field(ch, cfg.bias_field.degree, coeffs),
                AppliedTransform::Gibbs { alpha } => gibbs(ch, *alpha),
            };
        }
    }
    Ok(Augmented { patch: PatchStack::new(channels, roles, spacing, origin)?, applied })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch() -> PatchStack {
        let dims = [8, 6, 4];
        let mut img = Grid3::filled(dims, 0.0);
        let mut prior = Grid3::filled(dims, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() + 1.5;
        }
        for z in 1..3 {
            for y in 1..4 {
                for x in 2..6 {
                    prior.set(x, y, z, 1.0);
                }
            }
        }
        PatchStack::new(vec![img, prior], vec![ChannelRole::Image, ChannelRole::Prior], [1.0; 3], [0; 3]).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let p = patch();
        let a = augment(&p, &AugmentationConfig::disabled(9)).unwrap();
        assert!(a.applied.is_empty());
        assert_eq!(a.patch, p);
    }

    #[test]
    fn same_seed_same_output() {
        let mut cfg = AugmentationConfig { rng_seed: 5, ..Default::default() };
        cfg.set_all_probs(0.6);
        let p = patch();
        assert_eq!(augment(&p, &cfg).unwrap(), augment(&p, &cfg).unwrap());
    }

    #[test]
    fn flip_moves_all_channels() {
        let mut cfg = AugmentationConfig::disabled(1);
        cfg.flip.prob = 1.0;
        let p = patch();
        let a = augment(&p, &cfg).unwrap();
        for c in 0..2 {
            assert_eq!(a.patch.channel(c).get(0, 2, 1), p.channel(c).get(7, 2, 1));
        }
    }

    #[test]
    fn gamma_leaves_prior_alone() {
        let mut cfg = AugmentationConfig::disabled(3);
        cfg.contrast.prob = 1.0;
        let p = patch();
        let a = augment(&p, &cfg).unwrap();
        assert_eq!(a.patch.channel(1), p.channel(1));
        assert_ne!(a.patch.channel(0), p.channel(0));
    }

    #[test]
    fn gibbs_without_truncation_is_identity() {
        let p = patch();
        let g = gibbs(p.channel(0), 0.0);
        for (a, b) in g.data().iter().zip(p.channel(0).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let m = [[1.0, 0.1, 0.0], [0.05, 0.9, 0.0], [0.0, 0.2, 1.1]];
        let i = matmul3(m, invert3(m).unwrap());
        for r in 0..3 {
            for c in 0..3 {
                assert!((i[r][c] - f64::from(u8::from(r == c))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_config_rejected() {
        let mut cfg = AugmentationConfig::default();
        cfg.zoom.prob = 1.5;
        assert!(augment(&patch(), &cfg).is_err());
        let mut cfg = AugmentationConfig::default();
        cfg.contrast.range = (1.2, 0.8);
        assert!(augment(&patch(), &cfg).is_err());
    }
}
