//! Geometry-aware volumes, masks and multi-channel patches.
//!
//! Grids are stored x-fastest: the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.

mod augment;
mod channels;
mod crop;
mod normalize;
mod resample;

pub use augment::{
    apply_spatial, augment, AffineParams, AppliedTransform, AugmentationConfig, Augmented, BiasFieldParams,
    NoiseParams, RangeTransform, SpatialOp,
};
pub use channels::{assemble_channels, encode_prior, ChannelMode};
pub use crop::{crop_mask, crop_to_roi, mask_centroid, rounded_centroid};
pub use normalize::{normalize, percentile, NormMethod, Normalized};
pub use resample::{resample, resample_mask, resampled_dims, Interpolation};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense 3D grid, x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid(format!("grid dimensions must be >= 1, got {dims:?}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(invalid(format!("grid {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        [x, y, i / (self.dims[0] * self.dims[1])]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Value at signed coordinates, or `None` outside the grid.
    pub fn get_checked(&self, x: i64, y: i64, z: i64) -> Option<T> {
        let d = self.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= d[0] || y as usize >= d[1] || z as usize >= d[2] {
            None
        } else {
            Some(self.get(x as usize, y as usize, z as usize))
        }
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Voxel spacing (mm) and world position of voxel (0, 0, 0) (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { spacing, origin })
    }

    pub fn with_spacing(spacing: [f64; 3]) -> Result<Self> {
        Self::new(spacing, [0.0; 3])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_spacing(&self, other: &Geometry, tol: f64) -> bool {
        self.spacing.iter().zip(&other.spacing).all(|(a, b)| (a - b).abs() <= tol * a.abs().max(1.0))
    }
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(invalid(format!("spacing must be finite and > 0, got {spacing:?}")));
    }
    Ok(())
}

/// Scalar image with physical geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    pub grid: Grid3<f64>,
    pub geometry: Geometry,
}

impl Volume3D {
    pub fn new(grid: Grid3<f64>, geometry: Geometry) -> Result<Self> {
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {:?} of volume", grid.coords(i))));
        }
        check_spacing(geometry.spacing)?;
        Ok(Self { grid, geometry })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }
}

/// Label vocabulary of a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// 0 = background, 1 = gland.
    Gland,
    /// 0 = background, 1 = peripheral zone, 2 = transition zone.
    Zones,
}

impl LabelScheme {
    pub const PZ: u8 = 1;
    pub const TZ: u8 = 2;

    pub fn max_label(self) -> u8 {
        match self {
            Self::Gland => 1,
            Self::Zones => 2,
        }
    }

    pub fn foreground(self) -> &'static [u8] {
        match self {
            Self::Gland => &[1],
            Self::Zones => &[1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub grid: Grid3<u8>,
    pub scheme: LabelScheme,
    pub geometry: Geometry,
}

impl LabelMask {
    pub fn new(grid: Grid3<u8>, scheme: LabelScheme, geometry: Geometry) -> Result<Self> {
        if let Some(v) = grid.data().iter().find(|&&v| v > scheme.max_label()) {
            return Err(invalid(format!("label {v} is outside the {scheme:?} scheme")));
        }
        check_spacing(geometry.spacing)?;
        Ok(Self { grid, scheme, geometry })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn count(&self, label: u8) -> usize {
        self.grid.data().iter().filter(|&&v| v == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v != 0).count()
    }

    /// Collapse zones into a single gland label.
    pub fn to_gland(&self) -> LabelMask {
        LabelMask { grid: self.grid.map(|v| u8::from(v != 0)), scheme: LabelScheme::Gland, geometry: self.geometry }
    }

    /// Ensure this mask is voxel-aligned with a volume of the given dims and geometry.
    pub fn check_aligned(&self, dims: [usize; 3], geometry: &Geometry) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::Geometry(format!("mask dims {:?} vs volume dims {dims:?}", self.dims())));
        }
        if !self.geometry.same_spacing(geometry, 1e-6) {
            return Err(Error::Geometry(format!(
                "mask spacing {:?} vs volume spacing {:?}",
                self.geometry.spacing, geometry.spacing
            )));
        }
        Ok(())
    }
}

/// Named patch scales; the tag is the in-plane size of the canonical patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatchScale {
    #[serde(rename = "224")]
    S224,
    #[serde(rename = "192")]
    S192,
    #[serde(rename = "160")]
    S160,
}

impl PatchScale {
    pub const ALL: [PatchScale; 3] = [Self::S224, Self::S192, Self::S160];

    pub fn tag(self) -> &'static str {
        match self {
            Self::S224 => "224",
            Self::S192 => "192",
            Self::S160 => "160",
        }
    }

    pub fn canonical_size(self) -> [usize; 3] {
        match self {
            Self::S224 => [224, 224, 28],
            Self::S192 => [192, 192, 24],
            Self::S160 => [160, 160, 20],
        }
    }
}

impl std::str::FromStr for PatchScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.tag() == s).ok_or_else(|| invalid(format!("unknown patch scale {s:?}")))
    }
}

/// Patch extent (x, y, z voxels) and the spacing it is sampled at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub scale: PatchScale,
    pub size: [usize; 3],
    pub target_spacing: [f64; 3],
}

impl PatchSpec {
    pub const CANONICAL_SPACING: [f64; 3] = [0.3125, 0.3125, 3.0];
    /// Reduced-resolution grid: 1/8 in-plane and 1/4 through-plane voxel counts.
    pub const DESK_SPACING: [f64; 3] = [2.5, 2.5, 6.0];

    pub fn canonical(scale: PatchScale) -> Self {
        Self { scale, size: scale.canonical_size(), target_spacing: Self::CANONICAL_SPACING }
    }

    /// Same in-plane field of view as the canonical patch on a coarse grid.
    pub fn desk(scale: PatchScale) -> Self {
        let c = scale.canonical_size();
        Self { scale, size: [c[0] / 8, c[1] / 8, c[2] / 4], target_spacing: Self::DESK_SPACING }
    }

    /// Non-canonical sizes must be requested explicitly.
    pub fn custom(scale: PatchScale, size: [usize; 3], target_spacing: [f64; 3], allow_override: bool) -> Result<Self> {
        check_spacing(target_spacing)?;
        if size.contains(&0) {
            return Err(invalid(format!("patch size must be >= 1 per axis, got {size:?}")));
        }
        let spec = Self { scale, size, target_spacing };
        if !allow_override && !spec.is_canonical() {
            return Err(invalid(format!("patch size {size:?} is not canonical and override is off")));
        }
        Ok(spec)
    }

    pub fn is_canonical(&self) -> bool {
        PatchScale::ALL.iter().any(|s| s.canonical_size() == self.size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Image,
    Prior,
}

/// Multi-channel patch cut from a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStack {
    channels: Vec<Grid3<f64>>,
    roles: Vec<ChannelRole>,
    pub spacing: [f64; 3],
    /// Index of the patch's first voxel in the source volume (may be negative).
    pub window_origin: [i64; 3],
}

impl PatchStack {
    pub fn new(
        channels: Vec<Grid3<f64>>,
        roles: Vec<ChannelRole>,
        spacing: [f64; 3],
        window_origin: [i64; 3],
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(invalid("patch stack needs at least one channel"));
        }
        if channels.len() != roles.len() {
            return Err(invalid(format!("{} channels but {} roles", channels.len(), roles.len())));
        }
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(Error::Geometry("patch channels differ in shape".into()));
        }
        for (c, role) in channels.iter().zip(&roles) {
            if c.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("patch channel".into()));
            }
            if *role == ChannelRole::Prior && c.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("prior channel values must lie in [0, 1]"));
            }
        }
        check_spacing(spacing)?;
        Ok(Self { channels, roles, spacing, window_origin })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Grid3<f64>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Grid3<f64> {
        &self.channels[i]
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    pub fn image_channel(&self) -> &Grid3<f64> {
        let i = self.roles.iter().position(|r| *r == ChannelRole::Image).unwrap_or(0);
        &self.channels[i]
    }

    pub(crate) fn into_parts(self) -> (Vec<Grid3<f64>>, Vec<ChannelRole>, [f64; 3], [i64; 3]) {
        (self.channels, self.roles, self.spacing, self.window_origin)
    }

    /// Channels laid out as a `[C, Z, Y, X]` buffer (the grids are already x-fastest).
    pub fn to_tensor_data(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.data().iter().copied()).collect()
    }
}
