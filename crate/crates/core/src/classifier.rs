//! Risk classifiers: an anisotropic 3D CNN and a slice-encoder ("foundation style") model,
//! their losses, clinical-feature fusion, training and probability ensembling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vbiopsy_autograd::nn::{Conv3d, InstanceNorm, Linear};
use vbiopsy_autograd::{
    sigmoid, Ctx, GradAccumulator, Graph, LrSchedule, Optimizer, OptimizerKind, ParamStore, Tensor, Var,
};

use crate::error::{invalid, Error, Result};
use crate::imaging::{augment, AugmentationConfig, ChannelMode, PatchScale, PatchStack};
use crate::metrics::roc_auc;
use crate::phantom::Manifest;
use crate::segmenter::{zyx, SegTarget};

/// Probability clamp used by both losses.
pub const PROB_EPS: f64 = 1e-7;

/// Alpha-balanced focal loss for one prediction.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<f64> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    })
}

/// Binary cross-entropy with the positive term scaled by `pos_weight`.
pub fn weighted_bce(p: f64, positive: bool, pos_weight: f64) -> Result<f64> {
    if !(pos_weight > 0.0) {
        return Err(invalid(format!("pos_weight must be > 0, got {pos_weight}")));
    }
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(if positive { -pos_weight * p.ln() } else { -(1.0 - p).ln() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Focal { alpha: f64, gamma: f64 },
    WeightedBce { pos_weight: f64 },
}

impl LossKind {
    pub const FOCAL_DEFAULT: Self = Self::Focal { alpha: 0.8, gamma: 2.0 };
    pub const POS_WEIGHT_MAIN: f64 = 2.342;
    pub const POS_WEIGHT_GRID_BEST: f64 = 2.699;

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Focal { alpha, gamma } if (0.0..=1.0).contains(&alpha) && gamma >= 0.0 => Ok(()),
            Self::WeightedBce { pos_weight } if pos_weight > 0.0 => Ok(()),
            other => Err(invalid(format!("bad loss parameters {other:?}"))),
        }
    }

    pub fn eval(&self, p: f64, positive: bool) -> Result<f64> {
        match *self {
            Self::Focal { alpha, gamma } => focal_loss(p, positive, alpha, gamma),
            Self::WeightedBce { pos_weight } => weighted_bce(p, positive, pos_weight),
        }
    }

    /// Summed loss over a batch of logits `[n, 1]` against 0/1 labels `[n, 1]`.
    pub fn batch_sum<'g>(&self, logits: Var<'g>, labels: Var<'g>) -> Var<'g> {
        let p = logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
        let q = p.one_minus();
        let (pos, neg) = match *self {
            Self::Focal { alpha, gamma } => (
                q.powf(gamma).mul(p.ln_clamped(PROB_EPS)).scale(-alpha),
                p.powf(gamma).mul(q.ln_clamped(PROB_EPS)).scale(alpha - 1.0),
            ),
            Self::WeightedBce { pos_weight } => {
                (p.ln_clamped(PROB_EPS).scale(-pos_weight), q.ln_clamped(PROB_EPS).neg())
            }
        };
        labels.mul(pos).add(labels.one_minus().mul(neg)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Foundation,
}

/// Which anatomical prior and clinical features accompany the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    ImageOnly,
    Gland,
    Zones,
    Clinical,
    GlandClinical,
}

impl InputVariant {
    pub const ALL: [Self; 5] = [Self::ImageOnly, Self::Gland, Self::Zones, Self::Clinical, Self::GlandClinical];

    /// Suffix in the `G`/`Z`/`C` naming used for result tables.
    pub fn tag(self) -> &'static str {
        match self {
            Self::ImageOnly => "",
            Self::Gland => "+G",
            Self::Zones => "+Z",
            Self::Clinical => "+C",
            Self::GlandClinical => "+G+C",
        }
    }

    pub fn prior(self) -> Option<SegTarget> {
        match self {
            Self::Gland | Self::GlandClinical => Some(SegTarget::Gland),
            Self::Zones => Some(SegTarget::Zones),
            Self::ImageOnly | Self::Clinical => None,
        }
    }

    pub fn uses_clinical(self) -> bool {
        matches!(self, Self::Clinical | Self::GlandClinical)
    }

    pub fn channel_mode(self) -> ChannelMode {
        if self.prior().is_some() {
            ChannelMode::DupPlusPrior
        } else {
            ChannelMode::ImageOnly
        }
    }

    pub fn in_channels(self) -> usize {
        match self.channel_mode() {
            ChannelMode::ImageOnly => 1,
            ChannelMode::DupPlusPrior => 3,
        }
    }
}

/// Names of the clinical features, in vector order.
pub const CLINICAL_FEATURES: [&str; 2] = ["age", "psa_density"];

/// Per-feature standardisation fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ClinicalStats {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("clinical statistics need at least one row"))?;
        let k = first.len();
        if rows.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return Err(invalid("clinical rows must be finite and equally long"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> =
            (0..k).map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
        if let Some(j) = std.iter().position(|&s| !(s > 1e-12)) {
            return Err(invalid(format!("clinical feature {j} is constant on the training split")));
        }
        let names = if k == CLINICAL_FEATURES.len() {
            CLINICAL_FEATURES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..k).map(|j| format!("feature{j}")).collect()
        };
        Ok(Self { names, mean, std })
    }

    pub fn standardize(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(invalid(format!("clinical row has {} features, expected {}", row.len(), self.mean.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clinical feature".into()));
        }
        Ok(row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Stem kernel (x, y, z).
    pub stem_kernel: [usize; 3],
    /// Stride (x, y, z) of each stage after the stem.
    pub strides: Vec<[usize; 3]>,
    /// Stem width followed by one width per stage.
    pub widths: Vec<usize>,
    /// Adaptive max-pool output (x, y, z).
    pub pool_target: [usize; 3],
    /// Flattened feature length, hidden widths, then the single output.
    pub head_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Instance normalisation after each convolution (biases otherwise).
    pub instance_norm: bool,
}

impl CnnConfig {
    pub fn canonical() -> Self {
        Self {
            stem_kernel: [3, 3, 1],
            strides: vec![[2, 2, 1], [2, 2, 2], [2, 2, 2], [2, 2, 1]],
            widths: vec![32, 64, 128, 256, 320],
            pool_target: [4, 4, 4],
            head_widths: vec![20480, 4096, 1024, 1],
            leaky_slope: 0.01,
            instance_norm: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            widths: vec![4, 8, 12, 16, 16],
            pool_target: [1, 1, 1],
            head_widths: vec![16, 16, 1],
            instance_norm: false,
            ..Self::canonical()
        }
    }

    pub fn flattened_len(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.pool_target.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() + 1 || self.widths.contains(&0) {
            return Err(invalid("cnn needs a positive stem width plus one width per stage"));
        }
        if self.head_widths.first() != Some(&self.flattened_len()) {
            return Err(invalid(format!(
                "head input {:?} must equal last width x pooled voxels = {}",
                self.head_widths.first(),
                self.flattened_len()
            )));
        }
        if self.head_widths.last() != Some(&1) || self.head_widths.len() < 2 {
            return Err(invalid("cnn head must end in a single output"));
        }
        if self.stem_kernel.iter().chain(self.pool_target.iter()).chain(self.strides.iter().flatten()).any(|&v| v == 0) {
            return Err(invalid("kernel, strides and pool target must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrouperKind {
    /// Learned scoring of slice rows followed by a softmax over slices.
    Attention { hidden: usize },
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEncoderConfig {
    /// In-plane conv widths; each layer after the first halves x and y.
    pub widths: Vec<usize>,
    pub instance_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationConfig {
    pub encoder: SliceEncoderConfig,
    pub frozen_encoder: bool,
    pub squeeze_dim: usize,
    pub grouper: GrouperKind,
    pub head_hidden: Vec<usize>,
}

impl FoundationConfig {
    pub fn canonical() -> Self {
        Self {
            encoder: SliceEncoderConfig { widths: vec![32, 64, 128, 256], instance_norm: true },
            frozen_encoder: true,
            squeeze_dim: 512,
            grouper: GrouperKind::Attention { hidden: 128 },
            head_hidden: vec![128],
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: SliceEncoderConfig { widths: vec![16, 32, 32], instance_norm: false },
            frozen_encoder: false,
            grouper: GrouperKind::Attention { hidden: 32 },
            head_hidden: vec![32],
            ..Self::canonical()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.widths.is_empty() || self.encoder.widths.contains(&0) || self.squeeze_dim == 0 {
            return Err(invalid("slice encoder widths and squeeze dim must be positive"));
        }
        if let GrouperKind::Attention { hidden: 0 } = self.grouper {
            return Err(invalid("attention grouper needs a hidden width"));
        }
        if self.head_hidden.contains(&0) {
            return Err(invalid("head widths must be positive"));
        }
        Ok(())
    }
}

/// Convolution followed by optional instance normalisation and a leaky ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvBlock {
    conv: Conv3d,
    norm: Option<InstanceNorm>,
    slope: f64,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        norm: bool,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, !norm, rng),
            norm: norm.then(|| InstanceNorm::new(store, &format!("{name}.norm"), cout)),
            slope,
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv.forward(ctx, x);
        match &self.norm {
            Some(n) => n.forward(ctx, h),
            None => h,
        }
        .leaky_relu(self.slope)
    }
}

/// A 2D encoder applied independently to every axial slice.
pub trait SliceEncoder {
    fn in_channels(&self) -> usize;
    fn feature_len(&self) -> usize;
    /// `[n, c, d, h, w]` -> `[n, d, feature_len]`.
    fn encode<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g>;
}

/// Slice encoder made of in-plane convolutions followed by a per-slice global max.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvSliceEncoder {
    layers: Vec<ConvBlock>,
    in_channels: usize,
    features: usize,
}

impl ConvSliceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &SliceEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { [1, 1, 1] } else { [1, 2, 2] };
            let n = format!("{name}.layer{i}");
            layers.push(ConvBlock::new(store, &n, cin, w, [1, 3, 3], stride, cfg.instance_norm, 0.01, rng));
            cin = w;
        }
        Self { layers, in_channels, features: cin }
    }
}

impl SliceEncoder for ConvSliceEncoder {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn feature_len(&self) -> usize {
        self.features
    }

    fn encode<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let d = x.shape()[2];
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(ctx, h);
        }
        let n = h.shape()[0];
        // [n, f, d, 1, 1] -> [n, d, f]
        h.adaptive_max_pool3d([d, 1, 1]).reshape(&[n, self.features, d]).permute(&[0, 2, 1])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Grouper {
    Attention { score: Linear, out: Linear },
    Mean,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoundationNet<E = ConvSliceEncoder> {
    pub encoder: E,
    squeezer: Linear,
    grouper: Grouper,
    head: Vec<Linear>,
    squeeze_dim: usize,
    clinical_dim: usize,
}

impl FoundationNet<ConvSliceEncoder> {
    pub fn new(store: &mut ParamStore, cfg: &FoundationConfig, in_channels: usize, clinical_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let encoder = ConvSliceEncoder::new(store, "encoder", in_channels, &cfg.encoder, rng);
        Self::with_encoder(store, cfg, encoder, clinical_dim, rng)
    }
}

impl<E: SliceEncoder> FoundationNet<E> {
    pub fn with_encoder(store: &mut ParamStore, cfg: &FoundationConfig, encoder: E, clinical_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let squeezer = Linear::new(store, "squeezer", encoder.feature_len(), cfg.squeeze_dim, rng);
        let grouper = match cfg.grouper {
            GrouperKind::Attention { hidden } => Grouper::Attention {
                score: Linear::new(store, "grouper.score", cfg.squeeze_dim, hidden, rng),
                out: Linear::new(store, "grouper.out", hidden, 1, rng),
            },
            GrouperKind::Mean => Grouper::Mean,
        };
        let mut head = Vec::new();
        let mut width = cfg.squeeze_dim + clinical_dim;
        for (i, &w) in cfg.head_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(Linear::new(store, &format!("head{i}"), width, w, rng));
            width = w;
        }
        Self { encoder, squeezer, grouper, head, squeeze_dim: cfg.squeeze_dim, clinical_dim }
    }

    /// Squeezed slice rows `[n, d, squeeze_dim]` from encoder features `[n, d, f]`.
    pub fn squeeze<'g>(&self, ctx: &Ctx<'g>, features: Var<'g>) -> Var<'g> {
        let s = features.shape();
        let rows = self.squeezer.forward(ctx, features.reshape(&[s[0] * s[1], s[2]])).leaky_relu(0.01);
        rows.reshape(&[s[0], s[1], self.squeeze_dim])
    }

    /// Combine slice rows into one embedding per case; `mask` marks slices to ignore.
    fn group<'g>(&self, ctx: &Ctx<'g>, rows: Var<'g>, mask: Option<&Tensor>) -> Var<'g> {
        let s = rows.shape();
        match &self.grouper {
            Grouper::Mean => rows.mean_axes(&[1]).reshape(&[s[0], s[2]]),
            Grouper::Attention { score, out } => {
                let flat = rows.reshape(&[s[0] * s[1], s[2]]);
                let mut logits = out.forward(ctx, score.forward(ctx, flat).tanh()).reshape(&[s[0], s[1]]);
                if let Some(m) = mask {
                    logits = logits.add(ctx.input(m.clone()));
                }
                let w = logits.softmax(1).reshape(&[s[0], s[1], 1]);
                rows.mul(w).sum_axes(&[1]).reshape(&[s[0], s[2]])
            }
        }
    }

    /// Logits `[n, 1]` from encoder features.
    pub fn from_features<'g>(&self, ctx: &Ctx<'g>, features: Var<'g>, mask: Option<&Tensor>, clinical: Option<Var<'g>>) -> Var<'g> {
        let mut h = self.group(ctx, self.squeeze(ctx, features), mask);
        if let Some(c) = clinical {
            h = Var::concat(&[h, c], 1);
        }
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(ctx, h);
            if i < last {
                h = h.leaky_relu(0.01);
            }
        }
        h
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CnnNet {
    stem: ConvBlock,
    stages: Vec<ConvBlock>,
    pool_target: [usize; 3],
    head: Vec<Linear>,
    slope: f64,
}

impl CnnNet {
    pub fn new(store: &mut ParamStore, cfg: &CnnConfig, in_channels: usize, clinical_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let (norm, slope) = (cfg.instance_norm, cfg.leaky_slope);
        let stem = ConvBlock::new(store, "stem", in_channels, cfg.widths[0], zyx(cfg.stem_kernel), [1; 3], norm, slope, rng);
        let stages = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (cin, cout) = (cfg.widths[i], cfg.widths[i + 1]);
                ConvBlock::new(store, &format!("stage{i}"), cin, cout, [3, 3, 3], zyx(*s), norm, slope, rng)
            })
            .collect();
        let mut head = Vec::new();
        for (i, w) in cfg.head_widths.windows(2).enumerate() {
            let inputs = if i == 0 { w[0] + clinical_dim } else { w[0] };
            head.push(Linear::new(store, &format!("head{i}"), inputs, w[1], rng));
        }
        Self { stem, stages, pool_target: zyx(cfg.pool_target), head, slope: cfg.leaky_slope }
    }

    /// Flattened pooled features `[n, last_width * pooled]`.
    pub fn features<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = self.stem.forward(ctx, x);
        for stage in &self.stages {
            h = stage.forward(ctx, h);
        }
        let pooled = h.adaptive_max_pool3d(self.pool_target);
        let s = pooled.shape();
        pooled.reshape(&[s[0], s[1..].iter().product()])
    }

    pub fn logits<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, clinical: Option<Var<'g>>) -> Var<'g> {
        let mut h = self.features(ctx, x);
        if let Some(c) = clinical {
            h = Var::concat(&[h, c], 1);
        }
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(ctx, h);
            if i < last {
                h = h.leaky_relu(self.slope);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Cnn(CnnConfig),
    Foundation(FoundationConfig),
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            Self::Cnn(_) => Family::Cnn,
            Self::Foundation(_) => Family::Foundation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub model: ModelConfig,
    pub variant: InputVariant,
    pub scale: PatchScale,
    /// Patch size (x, y, z) the network is built for.
    pub patch_size: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches summed per optimizer step.
    pub accumulation: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    pub augmentation: Option<AugmentationConfig>,
    /// Probability at or above which a case is called high risk.
    pub threshold: f64,
    pub rng_seed: u64,
}

impl ClassifierConfig {
    /// Full-size hyperparameters for a family.
    pub fn full_size(family: Family, variant: InputVariant, scale: PatchScale) -> Self {
        let patch_size = crate::imaging::PatchSpec::canonical(scale).size;
        match family {
            Family::Cnn => Self {
                model: ModelConfig::Cnn(CnnConfig::canonical()),
                variant,
                scale,
                patch_size,
                epochs: 250,
                batch_size: 6,
                accumulation: 1,
                optimizer: OptimizerKind::sgd(0.9, 1e-6),
                learning_rate: 1e-3,
                schedule: LrSchedule::Cosine { period: 250, min_lr: 0.0 },
                loss: LossKind::FOCAL_DEFAULT,
                augmentation: Some(AugmentationConfig::default()),
                threshold: 0.5,
                rng_seed: 0,
            },
            Family::Foundation => Self {
                model: ModelConfig::Foundation(FoundationConfig::canonical()),
                variant,
                scale,
                patch_size,
                epochs: 200,
                batch_size: 8,
                accumulation: 32,
                optimizer: OptimizerKind::adamw(1e-4),
                learning_rate: 5e-4,
                schedule: LrSchedule::Cosine { period: 200, min_lr: 0.0 },
                loss: LossKind::WeightedBce { pos_weight: LossKind::POS_WEIGHT_MAIN },
                augmentation: Some(AugmentationConfig::default()),
                threshold: 0.5,
                rng_seed: 0,
            },
        }
    }

    /// Scaled-down preset for CPU runs on desk-spacing patches.
    pub fn desk(family: Family, variant: InputVariant, scale: PatchScale) -> Self {
        let patch_size = crate::imaging::PatchSpec::desk(scale).size;
        let base = Self::full_size(family, variant, scale);
        match family {
            Family::Cnn => Self {
                model: ModelConfig::Cnn(CnnConfig::desk()),
                patch_size,
                epochs: 30,
                batch_size: 6,
                optimizer: OptimizerKind::sgd(0.9, 1e-6),
                learning_rate: 1e-2,
                schedule: LrSchedule::Cosine { period: 30, min_lr: 1e-4 },
                ..base
            },
            Family::Foundation => Self {
                model: ModelConfig::Foundation(FoundationConfig::desk()),
                patch_size,
                epochs: 40,
                batch_size: 8,
                accumulation: 1,
                learning_rate: 1e-3,
                schedule: LrSchedule::Cosine { period: 40, min_lr: 1e-5 },
                ..base
            },
        }
    }

    pub fn family(&self) -> Family {
        self.model.family()
    }

    pub fn in_channels(&self) -> usize {
        self.variant.in_channels()
    }

    pub fn clinical_dim(&self) -> usize {
        if self.variant.uses_clinical() {
            CLINICAL_FEATURES.len()
        } else {
            0
        }
    }

    /// Short label such as `foundation 224+G`.
    pub fn model_tag(&self) -> String {
        let fam = match self.family() {
            Family::Cnn => "cnn",
            Family::Foundation => "foundation",
        };
        format!("{fam} {}{}", self.scale.tag(), self.variant.tag())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelConfig::Cnn(c) => c.validate()?,
            ModelConfig::Foundation(f) => f.validate()?,
        }
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(invalid("epochs, batch size and accumulation must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid("learning rate must be > 0 and threshold in [0, 1]"));
        }
        if self.patch_size.contains(&0) {
            return Err(invalid("patch size must be positive"));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassifierNet {
    Cnn(CnnNet),
    Foundation(FoundationNet),
}

impl ClassifierNet {
    pub fn new(store: &mut ParamStore, cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        match &cfg.model {
            ModelConfig::Cnn(c) => Self::Cnn(CnnNet::new(store, c, cfg.in_channels(), cfg.clinical_dim(), rng)),
            ModelConfig::Foundation(f) => {
                Self::Foundation(FoundationNet::new(store, f, cfg.in_channels(), cfg.clinical_dim(), rng))
            }
        }
    }

    /// Logits `[n, 1]` for `[n, c, d, h, w]` inputs and optional standardised clinical rows `[n, k]`.
    pub fn logits<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, mask: Option<&Tensor>, clinical: Option<Var<'g>>) -> Var<'g> {
        match self {
            Self::Cnn(net) => net.logits(ctx, x, clinical),
            Self::Foundation(net) => {
                let f = net.encoder.encode(ctx, x);
                net.from_features(ctx, f, mask, clinical)
            }
        }
    }
}

/// Additive attention mask `[n, d]`: large negative for slices whose first channel is all zero.
pub fn padding_slice_mask(x: &Tensor) -> Option<Tensor> {
    let s = x.shape();
    let (n, c, d, plane) = (s[0], s[1], s[2], s[3] * s[4]);
    let mut out = vec![0.0; n * d];
    let mut any = false;
    for i in 0..n {
        let base = i * c * d * plane;
        let empty: Vec<bool> = (0..d).map(|z| x.data()[base + z * plane..base + (z + 1) * plane].iter().all(|&v| v == 0.0)).collect();
        if empty.iter().all(|&e| e) {
            continue;
        }
        for (z, &e) in empty.iter().enumerate() {
            if e {
                out[i * d + z] = -1e9;
                any = true;
            }
        }
    }
    any.then(|| Tensor::new(&[n, d], out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClfEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierState {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    pub net: ClassifierNet,
    pub clinical_stats: Option<ClinicalStats>,
    pub curve: Vec<ClfEpoch>,
    pub best_epoch: Option<usize>,
    pub optimizer_steps: u64,
}

impl ClassifierState {
    pub fn init(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let net = ClassifierNet::new(&mut params, &config, &mut rng);
        if let ModelConfig::Foundation(f) = &config.model {
            params.set_trainable("encoder.", !f.frozen_encoder);
        }
        Ok(Self { config, params, net, clinical_stats: None, curve: Vec::new(), best_epoch: None, optimizer_steps: 0 })
    }

    pub fn from_parts(
        config: ClassifierConfig,
        stored: &ParamStore,
        clinical_stats: Option<ClinicalStats>,
        curve: Vec<ClfEpoch>,
        best_epoch: Option<usize>,
    ) -> Result<Self> {
        let mut s = Self::init(config)?;
        s.params.load_values_from(stored)?;
        s.clinical_stats = clinical_stats;
        s.curve = curve;
        s.best_epoch = best_epoch;
        Ok(s)
    }

    /// Check a patch against the network's channel count and size.
    pub fn check_patch(&self, patch: &PatchStack) -> Result<()> {
        if patch.num_channels() != self.config.in_channels() {
            return Err(invalid(format!(
                "patch has {} channels, {} expects {}",
                patch.num_channels(),
                self.config.model_tag(),
                self.config.in_channels()
            )));
        }
        if patch.dims() != self.config.patch_size {
            return Err(Error::Geometry(format!(
                "patch dims {:?} vs model patch size {:?}",
                patch.dims(),
                self.config.patch_size
            )));
        }
        Ok(())
    }

    /// Standardised clinical row, or `None` for variants without clinical input.
    pub fn clinical_input(&self, raw: Option<&[f64]>) -> Result<Option<Vec<f64>>> {
        if !self.config.variant.uses_clinical() {
            return Ok(None);
        }
        let raw = raw.ok_or_else(|| invalid(format!("{} needs clinical features", self.config.model_tag())))?;
        let stats = self.clinical_stats.as_ref().ok_or_else(|| invalid("classifier has no clinical statistics"))?;
        stats.standardize(raw).map(Some)
    }

    /// Graph path from an input variable to the logit `[n, 1]`, for gradient-based callers.
    pub fn logit_graph<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>, clinical: Option<&[f64]>) -> Var<'g> {
        let n = x.shape()[0];
        let c = clinical.map(|row| {
            let data: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
            ctx.input(Tensor::new(&[n, row.len()], data))
        });
        let mask = padding_slice_mask(&x.value());
        self.net.logits(ctx, x, mask.as_ref(), c)
    }

    pub fn predict(&self, case_id: &str, patch: &PatchStack, clinical_raw: Option<&[f64]>) -> Result<RiskPrediction> {
        self.check_patch(patch)?;
        let clinical = self.clinical_input(clinical_raw)?;
        let logit = self.logit_of_tensor(patch_tensor(patch), clinical.as_deref())?;
        Ok(RiskPrediction {
            case_id: case_id.to_string(),
            probability: sigmoid(logit),
            logit,
            model_tag: self.config.model_tag(),
            scale: Some(self.config.scale),
        })
    }

    /// Logit for a single `[1, c, d, h, w]` tensor with an already standardised clinical row.
    pub fn logit_of_tensor(&self, x: Tensor, clinical: Option<&[f64]>) -> Result<f64> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let v = self.logit_graph(&ctx, ctx.input(x), clinical).value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} logit", self.config.model_tag())));
        }
        Ok(v)
    }
}

/// `[1, c, d, h, w]` tensor of a patch.
pub fn patch_tensor(patch: &PatchStack) -> Tensor {
    let [x, y, z] = patch.dims();
    Tensor::new(&[1, patch.num_channels(), z, y, x], patch.to_tensor_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub case_id: String,
    pub probability: f64,
    pub logit: f64,
    pub model_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<PatchScale>,
}

/// Mean probability across members for one case.
pub fn ensemble_predict(preds: &[RiskPrediction]) -> Result<RiskPrediction> {
    let first = preds.first().ok_or_else(|| invalid("ensemble needs at least one member"))?;
    if let Some(p) = preds.iter().find(|p| p.case_id != first.case_id) {
        return Err(invalid(format!("ensemble mixes cases {} and {}", first.case_id, p.case_id)));
    }
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let p = preds.iter().map(|m| m.probability).sum::<f64>() / preds.len() as f64;
    let tags: Vec<&str> = preds.iter().map(|m| m.model_tag.as_str()).collect();
    Ok(RiskPrediction {
        case_id: first.case_id.clone(),
        probability: p,
        logit: logit(p),
        model_tag: format!("ensemble({})", tags.join(", ")),
        scale: None,
    })
}

/// Inverse sigmoid, saturating at the probability clamp.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

/// One labelled case prepared for the classifier.
#[derive(Clone, Debug)]
pub struct ClfSample {
    pub patch: PatchStack,
    /// Raw (unstandardised) clinical features in [`CLINICAL_FEATURES`] order.
    pub clinical: Option<Vec<f64>>,
    pub high_risk: bool,
}

struct Prepared {
    id: String,
    patch: PatchStack,
    clinical: Option<Vec<f64>>,
    label: f64,
    /// Frozen-encoder features `[1, d, f]` when they can be reused across epochs.
    cached: Option<Tensor>,
    mask: Option<Tensor>,
}

fn prepare(
    state: &ClassifierState,
    data: &BTreeMap<String, ClfSample>,
    ids: &[String],
    cache: bool,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let s = data.get(id).ok_or_else(|| invalid(format!("no classifier sample for {id}")))?;
        state.check_patch(&s.patch).map_err(|e| invalid(format!("{id}: {e}")))?;
        let clinical = state.clinical_input(s.clinical.as_deref()).map_err(|e| invalid(format!("{id}: {e}")))?;
        let x = patch_tensor(&s.patch);
        let mask = padding_slice_mask(&x);
        let cached = match (&state.net, cache) {
            (ClassifierNet::Foundation(net), true) => {
                let g = Graph::new();
                let ctx = Ctx::eval(&g, &state.params);
                Some((*net.encoder.encode(&ctx, ctx.input(x)).value()).clone())
            }
            _ => None,
        };
        out.push(Prepared {
            id: id.clone(),
            patch: s.patch.clone(),
            clinical,
            label: f64::from(u8::from(s.high_risk)),
            cached,
            mask,
        });
    }
    Ok(out)
}

fn batch_logits<'g>(state: &ClassifierState, ctx: &Ctx<'g>, items: &[(&Prepared, Tensor)]) -> Var<'g> {
    let n = items.len();
    let clinical = items[0].0.clinical.as_ref().map(|c| {
        let data: Vec<f64> = items.iter().flat_map(|(p, _)| p.clinical.clone().unwrap_or_default()).collect();
        ctx.input(Tensor::new(&[n, c.len()], data))
    });
    let masks: Vec<Option<&Tensor>> = items.iter().map(|(p, _)| p.mask.as_ref()).collect();
    let mask = if masks.iter().any(Option::is_some) {
        let shape = items[0].1.shape();
        let d = if items[0].0.cached.is_some() { shape[1] } else { shape[2] };
        let data: Vec<f64> =
            masks.iter().flat_map(|m| m.map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; d])).collect();
        Some(Tensor::new(&[n, d], data))
    } else {
        None
    };
    let x = Tensor::cat0(&items.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    match (&state.net, items[0].0.cached.is_some()) {
        (ClassifierNet::Foundation(net), true) => net.from_features(ctx, ctx.input(x), mask.as_ref(), clinical),
        _ => state.net.logits(ctx, ctx.input(x), mask.as_ref(), clinical),
    }
}

fn evaluate_split(state: &ClassifierState, items: &[Prepared]) -> Result<(f64, Option<f64>)> {
    let mut scores = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut loss = 0.0;
    for p in items {
        let input = p.cached.clone().unwrap_or_else(|| patch_tensor(&p.patch));
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &state.params);
        let l = batch_logits(state, &ctx, &[(p, input)]).value().item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!("{}: non-finite validation logit for {}", state.config.model_tag(), p.id)));
        }
        let prob = sigmoid(l);
        loss += state.config.loss.eval(prob, p.label > 0.5)?;
        scores.push(prob);
        labels.push(p.label > 0.5);
    }
    Ok((loss / items.len() as f64, roc_auc(&scores, &labels).ok()))
}

/// Number of optimizer steps one epoch takes.
pub fn optimizer_steps_per_epoch(samples: usize, batch_size: usize, accumulation: usize) -> usize {
    samples.div_ceil(batch_size).div_ceil(accumulation)
}

/// Train on the manifest's train split, keeping the state with the best validation AUC
/// (validation loss when AUC is undefined; the final epoch without a validation split).
pub fn train_classifier(
    data: &BTreeMap<String, ClfSample>,
    manifest: &Manifest,
    cfg: &ClassifierConfig,
) -> Result<ClassifierState> {
    let mut state = ClassifierState::init(cfg.clone())?;
    let train_ids = manifest.train();
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if cfg.variant.uses_clinical() {
        let rows = train_ids
            .iter()
            .map(|id| {
                data.get(id)
                    .and_then(|s| s.clinical.clone())
                    .ok_or_else(|| invalid(format!("{id}: clinical features missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        state.clinical_stats = Some(ClinicalStats::fit(&rows)?);
    }
    let frozen = matches!(&cfg.model, ModelConfig::Foundation(f) if f.frozen_encoder);
    let cache = frozen && cfg.augmentation.is_none();
    let train = prepare(&state, data, train_ids, cache)?;
    let val = prepare(&state, data, manifest.val(), cache)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xc1a5_0001);
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    // (score, params, epoch) where a larger score is better
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut sample_counter = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.lr(cfg.learning_rate, epoch);
        let mut acc = GradAccumulator::new();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &train[i];
                let input = match (&p.cached, &cfg.augmentation) {
                    (Some(t), _) => t.clone(),
                    (None, Some(aug)) => {
                        let mut a = aug.clone();
                        a.rng_seed = aug.rng_seed ^ cfg.rng_seed.rotate_left(17) ^ sample_counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                        patch_tensor(&augment(&p.patch, &a)?.patch)
                    }
                    (None, None) => patch_tensor(&p.patch),
                };
                sample_counter += 1;
                items.push((p, input));
            }
            let g = Graph::new();
            let ctx = Ctx::new(&g, &state.params);
            let logits = batch_logits(&state, &ctx, &items);
            let labels = ctx.input(Tensor::new(&[items.len(), 1], items.iter().map(|(p, _)| p.label).collect()));
            let loss = cfg.loss.batch_sum(logits, labels);
            let l = loss.value().item();
            if !l.is_finite() {
                let ids: Vec<&str> = items.iter().map(|(p, _)| p.id.as_str()).collect();
                return Err(Error::Diverged(format!(
                    "{} epoch {epoch}: loss {l} on batch {ids:?}, lr {lr}",
                    cfg.model_tag()
                )));
            }
            epoch_loss += l;
            let grads = g.backward(loss);
            acc.add(ctx.param_grads(&grads), items.len());
            if acc.micro_batches() == cfg.accumulation {
                opt.step(&mut state.params, &acc.take_mean(), lr);
            }
        }
        if !acc.is_empty() {
            opt.step(&mut state.params, &acc.take_mean(), lr);
        }
        if !state.params.all_finite() {
            return Err(Error::Diverged(format!("{} epoch {epoch}: non-finite weights", cfg.model_tag())));
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(&state, &val)?;
            (Some(l), a)
        };
        state.curve.push(ClfEpoch { epoch, train_loss, val_loss, val_auc });
        let score = match (val_auc, val_loss) {
            (Some(a), _) => a,
            (None, Some(l)) => -l,
            (None, None) => epoch as f64,
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, state.params.clone(), epoch));
        }
    }
    state.optimizer_steps = opt.steps();
    if let Some((_, params, epoch)) = best {
        state.params = params;
        state.best_epoch = Some(epoch);
    }
    Ok(state)
}
