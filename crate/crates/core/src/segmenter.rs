//! Compact 3D U-Net for gland and zonal delineation, plus mask post-processing and volumetry.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vbiopsy_autograd::nn::{Conv3d, InstanceNorm};
use vbiopsy_autograd::{Ctx, GradAccumulator, Graph, LrSchedule, Optimizer, OptimizerKind, ParamStore, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::imaging::{Geometry, Grid3, LabelMask, LabelScheme, PatchSpec, Volume3D};
use crate::phantom::Manifest;

/// Which anatomy a segmenter delineates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTarget {
    Gland,
    Zones,
}

impl SegTarget {
    pub fn scheme(self) -> LabelScheme {
        match self {
            Self::Gland => LabelScheme::Gland,
            Self::Zones => LabelScheme::Zones,
        }
    }

    pub fn classes(self) -> usize {
        self.scheme().max_label() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub target: SegTarget,
    /// Feature widths per resolution level; the depth is their count.
    pub widths: Vec<usize>,
    /// Downsampling stride (x, y, z) entering each level below the first.
    pub down_strides: Vec<[usize; 3]>,
    /// Spacing the network is trained and run at (mm).
    pub spacing: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Weight of the soft-Dice term added to cross-entropy.
    pub dice_weight: f64,
    /// Probability of a joint left-right flip per training sample.
    pub flip_prob: f64,
    pub rng_seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            target: SegTarget::Gland,
            widths: vec![4, 8, 16],
            down_strides: vec![[2, 2, 1], [2, 2, 2]],
            spacing: PatchSpec::DESK_SPACING,
            epochs: 12,
            batch_size: 4,
            learning_rate: 1e-2,
            weight_decay: 1e-5,
            schedule: LrSchedule::Constant,
            dice_weight: 1.0,
            flip_prob: 0.0,
            rng_seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(format!("widths {:?} must be positive and increasing", self.widths)));
        }
        if self.down_strides.len() + 1 != self.widths.len() {
            return Err(invalid("need one down-stride per level below the first"));
        }
        if self.down_strides.iter().flatten().any(|&s| s == 0) {
            return Err(invalid("strides must be >= 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.dice_weight >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("learning rate > 0, dice weight >= 0, flip prob in [0, 1]"));
        }
        crate::imaging::check_spacing(self.spacing)
    }

    /// Required divisor of each axis (x, y, z) so every downsampling step is exact.
    pub fn size_multiple(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for s in &self.down_strides {
            for a in 0..3 {
                m[a] *= s[a];
            }
        }
        m
    }
}

pub(crate) fn zyx(a: [usize; 3]) -> [usize; 3] {
    [a[2], a[1], a[0]]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvNorm {
    conv: Conv3d,
    norm: InstanceNorm,
}

impl ConvNorm {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, cout, [3, 3, 3], stride, false, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        self.norm.forward(ctx, self.conv.forward(ctx, x)).leaky_relu(0.01)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Level {
    first: ConvNorm,
    second: ConvNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UpLevel {
    /// Tensor-order factor matching the encoder stride.
    factor: [usize; 3],
    reduce: ConvNorm,
    first: ConvNorm,
    second: ConvNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UNet {
    encoder: Vec<Level>,
    decoder: Vec<UpLevel>,
    head: Conv3d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, cfg: &SegmenterConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut encoder = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            let (cin, stride) = if i == 0 { (1, [1; 3]) } else { (cfg.widths[i - 1], zyx(cfg.down_strides[i - 1])) };
            encoder.push(Level {
                first: ConvNorm::new(store, &format!("enc{i}.a"), cin, w, stride, rng),
                second: ConvNorm::new(store, &format!("enc{i}.b"), w, w, [1; 3], rng),
            });
        }
        let mut decoder = Vec::new();
        for i in (1..cfg.widths.len()).rev() {
            let (hi, lo) = (cfg.widths[i], cfg.widths[i - 1]);
            decoder.push(UpLevel {
                factor: zyx(cfg.down_strides[i - 1]),
                reduce: ConvNorm::new(store, &format!("dec{i}.up"), hi, lo, [1; 3], rng),
                first: ConvNorm::new(store, &format!("dec{i}.a"), 2 * lo, lo, [1; 3], rng),
                second: ConvNorm::new(store, &format!("dec{i}.b"), lo, lo, [1; 3], rng),
            });
        }
        let head = Conv3d::new(store, "head", cfg.widths[0], cfg.target.classes(), [1, 1, 1], [1; 3], true, rng);
        Self { encoder, decoder, head }
    }

    /// `[n, 1, d, h, w]` -> logits `[n, classes, d, h, w]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let mut skips = Vec::new();
        let mut h = x;
        for level in &self.encoder {
            h = level.second.forward(ctx, level.first.forward(ctx, h));
            skips.push(h);
        }
        skips.pop();
        for up in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = up.reduce.forward(ctx, h.upsample_nearest(up.factor));
            h = up.second.forward(ctx, up.first.forward(ctx, Var::concat(&[u, skip], 1)));
        }
        self.head.forward(ctx, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Clone, Debug)]
pub struct SegmenterState {
    pub config: SegmenterConfig,
    pub params: ParamStore,
    pub net: UNet,
    pub curve: Vec<SegEpoch>,
    pub best_epoch: Option<usize>,
}

impl SegmenterState {
    /// Freshly initialised (untrained) network.
    pub fn init(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let net = UNet::new(&mut params, &config, &mut rng);
        Ok(Self { config, params, net, curve: Vec::new(), best_epoch: None })
    }

    /// Rebuild a state from its config and stored parameter values.
    pub fn from_parts(config: SegmenterConfig, stored: &ParamStore, curve: Vec<SegEpoch>, best_epoch: Option<usize>) -> Result<Self> {
        let mut s = Self::init(config)?;
        s.params.load_values_from(stored)?;
        s.curve = curve;
        s.best_epoch = best_epoch;
        Ok(s)
    }
}

/// Training pair: an image and its reference mask on the same grid.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Volume3D,
    pub target: LabelMask,
}

fn zscore(data: &[f64]) -> Vec<f64> {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std <= 1e-12 {
        return vec![0.0; data.len()];
    }
    data.iter().map(|v| (v - mean) / std).collect()
}

fn padded_dims(dims: [usize; 3], multiple: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].div_ceil(multiple[a]) * multiple[a])
}

/// Z-scored image zero-padded to the network multiple, as `[1, 1, d, h, w]`.
fn input_tensor(grid: &Grid3<f64>, cfg: &SegmenterConfig) -> Tensor {
    let dims = grid.dims();
    let pd = padded_dims(dims, cfg.size_multiple());
    let norm = zscore(grid.data());
    let mut out = vec![0.0; pd.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = dims[0] * (y + dims[1] * z);
            let dst = pd[0] * (y + pd[1] * z);
            out[dst..dst + dims[0]].copy_from_slice(&norm[src..src + dims[0]]);
        }
    }
    Tensor::new(&[1, 1, pd[2], pd[1], pd[0]], out)
}

fn one_hot(mask: &Grid3<u8>, classes: usize, cfg: &SegmenterConfig) -> Tensor {
    let dims = mask.dims();
    let pd = padded_dims(dims, cfg.size_multiple());
    let vox: usize = pd.iter().product();
    let mut out = vec![0.0; classes * vox];
    // padded voxels count as background
    out[..vox].iter_mut().for_each(|v| *v = 1.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let l = mask.get(x, y, z) as usize;
                let i = x + pd[0] * (y + pd[1] * z);
                out[i] = 0.0;
                out[l * vox + i] = 1.0;
            }
        }
    }
    Tensor::new(&[1, classes, pd[2], pd[1], pd[0]], out)
}

fn flip_x(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[4];
    let mut out = t.clone();
    for (row_out, row_in) in out.data_mut().chunks_exact_mut(w).zip(t.data().chunks_exact(w)) {
        for x in 0..w {
            row_out[x] = row_in[w - 1 - x];
        }
    }
    out
}

/// Cross-entropy plus weighted soft-Dice over foreground classes.
fn seg_loss<'g>(logits: Var<'g>, target: Var<'g>, dice_weight: f64) -> Var<'g> {
    let s = logits.shape();
    let voxels = (s[0] * s[2] * s[3] * s[4]) as f64;
    let ce = logits.log_softmax(1).mul(target).sum().scale(-1.0 / voxels);
    if dice_weight == 0.0 {
        return ce;
    }
    let k = s[1];
    let probs = logits.softmax(1).narrow(1, 1, k - 1);
    let t = target.narrow(1, 1, k - 1);
    let inter = probs.mul(t).sum_axes(&[2, 3, 4]);
    let denom = probs.add(t).sum_axes(&[2, 3, 4]);
    let dice = inter.scale(2.0).offset(1e-5).div(denom.offset(1e-5));
    ce.add(dice.mean().one_minus().scale(dice_weight))
}

fn argmax_labels(logits: &Tensor, dims: [usize; 3]) -> Grid3<u8> {
    let s = logits.shape();
    let (k, pd) = (s[1], [s[4], s[3], s[2]]);
    let vox: usize = pd.iter().product();
    let mut out = Grid3::filled(dims, 0u8);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + pd[0] * (y + pd[1] * z);
                let mut best = 0;
                for c in 1..k {
                    if logits.data()[c * vox + i] > logits.data()[best * vox + i] {
                        best = c;
                    }
                }
                out.set(x, y, z, best as u8);
            }
        }
    }
    out
}

/// Raw argmax segmentation of a volume already at the segmenter's spacing.
pub fn segment(vol: &Volume3D, state: &SegmenterState, target: SegTarget) -> Result<LabelMask> {
    if target != state.config.target {
        return Err(invalid(format!("segmenter was trained for {:?}, asked for {target:?}", state.config.target)));
    }
    let want = Geometry { spacing: state.config.spacing, origin: vol.geometry.origin };
    if !vol.geometry.same_spacing(&want, 1e-6) {
        return Err(Error::Geometry(format!(
            "volume spacing {:?} differs from segmenter spacing {:?}",
            vol.geometry.spacing, state.config.spacing
        )));
    }
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &state.params);
    let logits = state.net.forward(&ctx, ctx.input(input_tensor(&vol.grid, &state.config))).value();
    if !logits.is_finite() {
        return Err(Error::NonFinite("segmenter logits".into()));
    }
    LabelMask::new(argmax_labels(&logits, vol.dims()), target.scheme(), vol.geometry)
}

/// Mean DSC over the foreground labels of the target scheme.
pub fn mean_foreground_dice(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    let fg = truth.scheme.foreground();
    let mut total = 0.0;
    for &l in fg {
        total += dice(pred, truth, l)?;
    }
    Ok(total / fg.len() as f64)
}

fn validation_dsc(state: &SegmenterState, data: &BTreeMap<String, SegSample>, ids: &[String]) -> Result<f64> {
    let mut total = 0.0;
    for id in ids {
        let s = &data[id];
        let pred = segment(&s.image, state, state.config.target)?;
        total += mean_foreground_dice(&pred, &s.target)?;
    }
    Ok(total / ids.len() as f64)
}

/// Train on the manifest's train split, selecting the epoch with the best validation DSC.
///
/// Without a validation split the final epoch is kept.
pub fn train_segmenter(
    data: &BTreeMap<String, SegSample>,
    manifest: &Manifest,
    cfg: &SegmenterConfig,
) -> Result<SegmenterState> {
    let mut state = SegmenterState::init(cfg.clone())?;
    let train_ids = manifest.train();
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let classes = cfg.target.classes();
    let mut prepared = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let s = data.get(id).ok_or_else(|| invalid(format!("no segmentation sample for {id}")))?;
        s.target.check_aligned(s.image.dims(), &s.image.geometry)?;
        if s.target.scheme != cfg.target.scheme() {
            return Err(invalid(format!("{id}: reference mask scheme {:?} does not match target", s.target.scheme)));
        }
        if !s.image.geometry.same_spacing(&Geometry { spacing: cfg.spacing, origin: [0.0; 3] }, 1e-6) {
            return Err(Error::Geometry(format!("{id}: spacing {:?} vs training spacing {:?}", s.image.spacing(), cfg.spacing)));
        }
        prepared.push((id.clone(), input_tensor(&s.image.grid, cfg), one_hot(&s.target.grid, classes, cfg)));
    }
    let val_ids: Vec<String> = manifest.val().iter().filter(|id| data.contains_key(*id)).cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5e6_0001);
    let mut opt = Optimizer::new(OptimizerKind::adamw(cfg.weight_decay));
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.lr(cfg.learning_rate, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let (id, x, t) = &prepared[i];
                let flip = rand::Rng::random::<f64>(&mut rng) < cfg.flip_prob;
                let (x, t) = if flip { (flip_x(x), flip_x(t)) } else { (x.clone(), t.clone()) };
                let g = Graph::new();
                let ctx = Ctx::new(&g, &state.params);
                let logits = state.net.forward(&ctx, ctx.input(x));
                let loss = seg_loss(logits, ctx.input(t), cfg.dice_weight);
                let l = loss.value().item();
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("segmenter epoch {epoch}, case {id}: loss {l}, lr {lr}")));
                }
                epoch_loss += l;
                let grads = g.backward(loss);
                acc.add(ctx.param_grads(&grads), 1);
            }
            let grads = acc.take_mean();
            opt.step(&mut state.params, &grads, lr);
            if !state.params.all_finite() {
                return Err(Error::Diverged(format!("segmenter epoch {epoch}: non-finite weights after update")));
            }
        }
        let train_loss = epoch_loss / prepared.len() as f64;
        let val_dsc = if val_ids.is_empty() { f64::NAN } else { validation_dsc(&state, data, &val_ids)? };
        state.curve.push(SegEpoch { epoch, train_loss, val_dsc });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_dsc > *b || val_ids.is_empty());
        if improved {
            best = Some((val_dsc, state.params.clone(), epoch));
        }
    }
    if let Some((_, params, epoch)) = best {
        state.params = params;
        state.best_epoch = Some(epoch);
    }
    Ok(state)
}

/// Result of connected-component filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentFilter {
    pub mask: LabelMask,
    /// Set when the input had no foreground at all.
    pub empty: bool,
}

/// Keep only the largest 26-connected component of each foreground label.
pub fn largest_component(mask: &LabelMask) -> ComponentFilter {
    let dims = mask.dims();
    let grid = &mask.grid;
    let mut out = Grid3::filled(dims, 0u8);
    let mut seen = vec![false; grid.len()];
    let mut any = false;
    for &label in mask.scheme.foreground() {
        let mut best: Vec<usize> = Vec::new();
        for start in 0..grid.len() {
            if seen[start] || grid.data()[start] != label {
                continue;
            }
            any = true;
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                let c = grid.coords(i);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (x, y, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                            if grid.get_checked(x, y, z) == Some(label) {
                                let j = grid.index(x as usize, y as usize, z as usize);
                                if !seen[j] {
                                    seen[j] = true;
                                    comp.push(j);
                                    queue.push_back(j);
                                }
                            }
                        }
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        for i in best {
            out.data_mut()[i] = label;
        }
    }
    ComponentFilter {
        mask: LabelMask { grid: out, scheme: mask.scheme, geometry: mask.geometry },
        empty: !any,
    }
}

/// DSC for one label and whether both masks were empty for it (scored 1.0).
pub fn dice_detailed(pred: &LabelMask, truth: &LabelMask, label: u8) -> Result<(f64, bool)> {
    truth.check_aligned(pred.dims(), &pred.geometry)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.grid.data().iter().zip(truth.grid.data()) {
        let (ip, it) = (p == label, t == label);
        a += usize::from(ip);
        b += usize::from(it);
        both += usize::from(ip && it);
    }
    if a + b == 0 {
        return Ok((1.0, true));
    }
    Ok((2.0 * both as f64 / (a + b) as f64, false))
}

pub fn dice(pred: &LabelMask, truth: &LabelMask, label: u8) -> Result<f64> {
    dice_detailed(pred, truth, label).map(|(d, _)| d)
}

/// Foreground volume in cubic centimetres.
pub fn gland_volume_cc(mask: &LabelMask) -> f64 {
    mask.foreground_count() as f64 * mask.geometry.voxel_volume_mm3() / 1000.0
}

pub fn psa_density(psa: f64, volume_cc: f64) -> Result<f64> {
    if !(volume_cc > 0.0) {
        return Err(invalid(format!("PSA density needs a positive gland volume, got {volume_cc} cc")));
    }
    if !(psa > 0.0) {
        return Err(invalid(format!("PSA must be > 0, got {psa}")));
    }
    Ok(psa / volume_cc)
}
