//! VAE-GAN reconstruction model, reconstruction-fidelity gating and latent counterfactual sweeps.
//!
//! Images enter as single-channel `[1, 1, z, y, x]` tensors. A counterfactual perturbs the
//! posterior mean along the gradient of the classifier output with respect to the latent code
//! and decodes the result.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vbiopsy_autograd::nn::{Conv3d, Linear};
use vbiopsy_autograd::{sigmoid, Ctx, Graph, Optimizer, OptimizerKind, ParamId, ParamStore, Tensor, Var};

use crate::classifier::ClassifierState;
use crate::error::{invalid, Error, Result};
use crate::imaging::{ChannelMode, ChannelRole, Grid3, PatchScale, PatchSpec, PatchStack};
use crate::phantom::Manifest;
use crate::segmenter::zyx;

/// Clamp applied inside the adversarial logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    /// Epochs trained without the adversarial term.
    pub warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1e-6, perceptual: 1e-3, adversarial: 1e-2, warmup_epochs: 10 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("kl", self.kl), ("perceptual", self.perceptual), ("adversarial", self.adversarial)] {
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn adversarial_active(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// Weighted sum of the components; the adversarial term counts from the end of warm-up.
pub fn vaegan_total_loss(c: &LossComponents, w: &LossWeights, epoch: usize) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("reconstruction", c.reconstruction),
        ("kl", c.kl),
        ("perceptual", c.perceptual),
        ("adversarial", c.adversarial),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss = {v}")));
        }
    }
    for (name, v) in [("reconstruction", c.reconstruction), ("kl", c.kl), ("perceptual", c.perceptual)] {
        if v < 0.0 {
            return Err(invalid(format!("{name} loss = {v} is negative")));
        }
    }
    let mut total = c.reconstruction + w.kl * c.kl + w.perceptual * c.perceptual;
    if w.adversarial_active(epoch) {
        total += w.adversarial * c.adversarial;
    }
    Ok(total)
}

/// Diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl Posterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(invalid(format!("posterior mean has {} entries, log variance {}", mean.len(), log_var.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(invalid("degenerate posterior: a standard deviation is zero or infinite"));
        }
        Ok(Self { mean, log_var })
    }

    pub fn from_std(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(invalid(format!("degenerate posterior: standard deviation {s}")));
        }
        Self::new(mean, std.iter().map(|s| 2.0 * s.ln()).collect())
    }

    /// `KL(q || N(0, I))` summed over dimensions.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum()
    }
}

/// Loss components for one image and its reconstruction.
///
/// `disc_real` / `disc_fake` are discriminator outputs on real and reconstructed inputs, and
/// `features` holds per-layer perceptual activations `(phi_l(x), phi_l(x_rec))`.
pub fn loss_components(
    x: &[f64],
    x_rec: &[f64],
    posterior: &Posterior,
    disc_real: &[f64],
    disc_fake: &[f64],
    features: &[(Vec<f64>, Vec<f64>)],
) -> Result<LossComponents> {
    if x.len() != x_rec.len() || x.is_empty() {
        return Err(invalid(format!("image has {} voxels, reconstruction {}", x.len(), x_rec.len())));
    }
    if disc_real.len() != disc_fake.len() || disc_real.is_empty() {
        return Err(invalid("discriminator outputs must be non-empty and paired"));
    }
    if disc_real.iter().chain(disc_fake).any(|d| !(0.0..=1.0).contains(d)) {
        return Err(invalid("discriminator outputs must lie in [0, 1]"));
    }
    let reconstruction = x.iter().zip(x_rec).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let mut perceptual = 0.0;
    for (l, (a, b)) in features.iter().enumerate() {
        if a.len() != b.len() || a.is_empty() {
            return Err(invalid(format!("perceptual layer {l}: {} vs {} features", a.len(), b.len())));
        }
        perceptual += a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64;
    }
    let adversarial = disc_real
        .iter()
        .zip(disc_fake)
        .map(|(r, f)| r.max(LOG_EPS).ln() + (1.0 - f).max(LOG_EPS).ln())
        .sum::<f64>()
        / disc_real.len() as f64;
    Ok(LossComponents { reconstruction, kl: posterior.kl_to_standard_normal(), perceptual, adversarial })
}

/// True when every discriminator output sits at the log clamp (within `tol` of 0 or 1).
pub fn discriminator_saturated(outputs: &[f64], tol: f64) -> bool {
    !outputs.is_empty() && outputs.iter().all(|&d| d <= tol || d >= 1.0 - tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeGanConfig {
    /// Input patch size (x, y, z).
    pub patch_size: [usize; 3],
    pub widths: Vec<usize>,
    /// Stride (x, y, z) of each encoder downsampling step; one fewer than `widths`.
    pub down_strides: Vec<[usize; 3]>,
    pub latent_channels: usize,
    pub disc_widths: Vec<usize>,
    pub perceptual_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub weights: LossWeights,
    /// Stop after this many epochs without a better validation loss.
    pub patience: usize,
    pub rng_seed: u64,
}

impl VaeGanConfig {
    /// Full-resolution settings on the smallest canonical patch.
    pub fn canonical() -> Self {
        Self {
            patch_size: PatchScale::S160.canonical_size(),
            widths: vec![32, 64, 128],
            down_strides: vec![[2, 2, 1], [2, 2, 2]],
            latent_channels: 8,
            disc_widths: vec![32, 64, 128],
            perceptual_widths: vec![16, 32],
            leaky_slope: 0.2,
            epochs: 1000,
            batch_size: 4,
            generator_lr: 1e-4,
            discriminator_lr: 1e-5,
            weights: LossWeights::default(),
            patience: 200,
            rng_seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            patch_size: PatchSpec::desk(PatchScale::S160).size,
            widths: vec![8, 16, 16],
            down_strides: vec![[2, 2, 1], [2, 2, 1]],
            latent_channels: 8,
            disc_widths: vec![8, 16],
            perceptual_widths: vec![8, 8],
            leaky_slope: 0.2,
            epochs: 50,
            batch_size: 4,
            generator_lr: 3e-3,
            discriminator_lr: 3e-4,
            weights: LossWeights::default(),
            patience: 20,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid("encoder widths must be non-empty and positive"));
        }
        if self.down_strides.len() + 1 != self.widths.len() {
            return Err(invalid(format!(
                "{} widths need {} downsampling strides, got {}",
                self.widths.len(),
                self.widths.len() - 1,
                self.down_strides.len()
            )));
        }
        let m = self.size_multiple();
        if (0..3).any(|a| m[a] == 0 || self.patch_size[a] % m[a] != 0) {
            return Err(invalid(format!("patch size {:?} is not a multiple of the total stride {m:?}", self.patch_size)));
        }
        if self.latent_channels == 0 || self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(invalid("latent channels and discriminator widths must be positive"));
        }
        if self.perceptual_widths.contains(&0) {
            return Err(invalid("perceptual widths must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        for (name, lr) in [("generator_lr", self.generator_lr), ("discriminator_lr", self.discriminator_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid(format!("{name} = {lr} must be positive")));
            }
        }
        Ok(())
    }

    /// Product of encoder strides per axis (x, y, z).
    pub fn size_multiple(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for s in &self.down_strides {
            for a in 0..3 {
                m[a] *= s[a];
            }
        }
        m
    }

    /// Latent tensor shape for one image: `[1, c, z, y, x]`.
    pub fn latent_shape(&self) -> Vec<usize> {
        let m = self.size_multiple();
        let p = self.patch_size;
        vec![1, self.latent_channels, p[2] / m[2], p[1] / m[1], p[0] / m[0]]
    }

    /// Image tensor shape: `[1, 1, z, y, x]`.
    pub fn image_shape(&self) -> Vec<usize> {
        let p = self.patch_size;
        vec![1, 1, p[2], p[1], p[0]]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeGanNet {
    encoder: Vec<Conv3d>,
    to_mean: Conv3d,
    to_log_var: Conv3d,
    from_latent: Conv3d,
    /// Upsampling factor (z, y, x) then convolution, deepest first.
    decoder: Vec<([usize; 3], Conv3d)>,
    to_image: Conv3d,
    disc: Vec<Conv3d>,
    disc_head: Linear,
    perceptual: Vec<Conv3d>,
    slope: f64,
}

const K3: [usize; 3] = [3, 3, 3];

impl VaeGanNet {
    pub fn new(store: &mut ParamStore, cfg: &VaeGanConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = &cfg.widths;
        let mut encoder = vec![Conv3d::new(store, "encoder.layer0", 1, w[0], K3, [1, 1, 1], true, rng)];
        for i in 1..w.len() {
            let stride = zyx(cfg.down_strides[i - 1]);
            encoder.push(Conv3d::new(store, &format!("encoder.layer{i}"), w[i - 1], w[i], K3, stride, true, rng));
        }
        let last = *w.last().expect("validated widths");
        let lc = cfg.latent_channels;
        let to_mean = Conv3d::new(store, "encoder.mean", last, lc, [1, 1, 1], [1, 1, 1], true, rng);
        let to_log_var = Conv3d::new(store, "encoder.log_var", last, lc, [1, 1, 1], [1, 1, 1], true, rng);
        // start near unit variance
        store.value_mut(to_log_var.weight).scale_assign(0.01);
        let from_latent = Conv3d::new(store, "decoder.input", lc, last, [1, 1, 1], [1, 1, 1], true, rng);
        let mut decoder = Vec::new();
        for i in (1..w.len()).rev() {
            let conv = Conv3d::new(store, &format!("decoder.layer{i}"), w[i], w[i - 1], K3, [1, 1, 1], true, rng);
            decoder.push((zyx(cfg.down_strides[i - 1]), conv));
        }
        let to_image = Conv3d::new(store, "decoder.output", w[0], 1, K3, [1, 1, 1], true, rng);
        let mut disc = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.disc_widths.iter().enumerate() {
            disc.push(Conv3d::new(store, &format!("disc.layer{i}"), cin, c, K3, [1, 2, 2], true, rng));
            cin = c;
        }
        let disc_head = Linear::new(store, "disc.head", cin, 1, rng);
        let mut perceptual = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.perceptual_widths.iter().enumerate() {
            perceptual.push(Conv3d::new(store, &format!("perceptual.layer{i}"), cin, c, [1, 3, 3], [1, 1, 1], true, rng));
            cin = c;
        }
        store.set_trainable("perceptual.", false);
        Self {
            encoder,
            to_mean,
            to_log_var,
            from_latent,
            decoder,
            to_image,
            disc,
            disc_head,
            perceptual,
            slope: cfg.leaky_slope,
        }
    }

    /// Posterior mean and clamped log variance.
    pub fn encode<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let mut h = x;
        for conv in &self.encoder {
            h = conv.forward(ctx, h).leaky_relu(self.slope);
        }
        (self.to_mean.forward(ctx, h), self.to_log_var.forward(ctx, h).clamp(-10.0, 10.0))
    }

    pub fn decode<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Var<'g> {
        let mut h = self.from_latent.forward(ctx, z).leaky_relu(self.slope);
        for (factor, conv) in &self.decoder {
            h = conv.forward(ctx, h.upsample_nearest(*factor)).leaky_relu(self.slope);
        }
        self.to_image.forward(ctx, h)
    }

    /// Probability that each input is real, `[n, 1]`.
    pub fn discriminate<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for conv in &self.disc {
            h = conv.forward(ctx, h).leaky_relu(self.slope);
        }
        let s = h.shape();
        let pooled = h.mean_axes(&[2, 3, 4]).reshape(&[s[0], s[1]]);
        self.disc_head.forward(ctx, pooled).sigmoid()
    }

    /// Slicewise feature maps after each perceptual layer.
    pub fn perceptual_features<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.perceptual.len());
        for conv in &self.perceptual {
            h = conv.forward(ctx, h).leaky_relu(self.slope);
            out.push(h);
        }
        out
    }
}

/// Graph versions of the loss terms, batch-averaged.
struct GraphLosses<'g> {
    reconstruction: Var<'g>,
    kl: Var<'g>,
    perceptual: Var<'g>,
}

fn graph_losses<'g>(net: &VaeGanNet, ctx: &Ctx<'g>, x: Var<'g>, x_rec: Var<'g>, mean: Var<'g>, log_var: Var<'g>) -> GraphLosses<'g> {
    let n = x.shape()[0] as f64;
    let reconstruction = x_rec.sub(x).abs().mean();
    let kl = mean.square().add(log_var.exp()).sub(log_var).offset(-1.0).sum().scale(0.5 / n);
    let fx = net.perceptual_features(ctx, x);
    let fr = net.perceptual_features(ctx, x_rec);
    let mut perceptual = ctx.input(Tensor::scalar(0.0));
    for (a, b) in fx.into_iter().zip(fr) {
        perceptual = perceptual.add(b.sub(a).square().mean());
    }
    GraphLosses { reconstruction, kl, perceptual }
}

/// Mean over the batch of `ln D(x) + ln(1 - D(x_rec))`.
fn graph_adversarial<'g>(d_real: Var<'g>, d_fake: Var<'g>) -> Var<'g> {
    d_real.ln_clamped(LOG_EPS).add(d_fake.one_minus().ln_clamped(LOG_EPS)).mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub train: LossComponents,
    pub train_total: f64,
    pub val: Option<LossComponents>,
    pub val_total: Option<f64>,
    pub disc_real_mean: Option<f64>,
    pub disc_fake_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeGanState {
    pub config: VaeGanConfig,
    pub params: ParamStore,
    pub net: VaeGanNet,
    /// Validation components of the untrained model.
    pub initial_val: Option<LossComponents>,
    pub curve: Vec<VaeEpoch>,
    pub best_epoch: Option<usize>,
}

impl VaeGanState {
    pub fn init(config: VaeGanConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let net = VaeGanNet::new(&mut params, &config, &mut rng);
        Ok(Self { config, params, net, initial_val: None, curve: Vec::new(), best_epoch: None })
    }

    pub fn from_parts(
        config: VaeGanConfig,
        stored: &ParamStore,
        initial_val: Option<LossComponents>,
        curve: Vec<VaeEpoch>,
        best_epoch: Option<usize>,
    ) -> Result<Self> {
        let mut s = Self::init(config)?;
        s.params.load_values_from(stored)?;
        s.initial_val = initial_val;
        s.curve = curve;
        s.best_epoch = best_epoch;
        Ok(s)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::Geometry(format!(
                "image tensor {:?} vs VAE input {:?}",
                x.shape(),
                self.config.image_shape()
            )));
        }
        Ok(())
    }

    pub fn posterior(&self, x: &Tensor) -> Result<Posterior> {
        self.check_image(x)?;
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let (m, lv) = self.net.encode(&ctx, ctx.input(x.clone()));
        Posterior::new(m.value().data().to_vec(), lv.value().data().to_vec())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_mean(x)?;
        self.decode_tensor(&z)
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != self.config.latent_shape() {
            return Err(Error::Geometry(format!("latent {:?} vs expected {:?}", z.shape(), self.config.latent_shape())));
        }
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let out = (*self.net.decode(&ctx, ctx.input(z.clone())).value()).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("decoded image".into()));
        }
        Ok(out)
    }

    /// Validation components with the posterior mean as latent code.
    pub fn evaluate(&self, images: &[Tensor]) -> Result<LossComponents> {
        if images.is_empty() {
            return Err(Error::EmptySplit("no images to evaluate".into()));
        }
        let mut sum = LossComponents::default();
        for x in images {
            self.check_image(x)?;
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &self.params);
            let xv = ctx.input(x.clone());
            let (m, lv) = self.net.encode(&ctx, xv);
            let xr = self.net.decode(&ctx, m);
            let l = graph_losses(&self.net, &ctx, xv, xr, m, lv);
            let adv = graph_adversarial(self.net.discriminate(&ctx, xv), self.net.discriminate(&ctx, xr));
            sum.reconstruction += l.reconstruction.value().item();
            sum.kl += l.kl.value().item();
            sum.perceptual += l.perceptual.value().item();
            sum.adversarial += adv.value().item();
        }
        let n = images.len() as f64;
        Ok(LossComponents {
            reconstruction: sum.reconstruction / n,
            kl: sum.kl / n,
            perceptual: sum.perceptual / n,
            adversarial: sum.adversarial / n,
        })
    }
}

fn grads_with_prefix(
    store: &ParamStore,
    grads: Vec<(ParamId, Tensor)>,
    keep: impl Fn(&str) -> bool,
) -> Vec<(ParamId, Tensor)> {
    grads.into_iter().filter(|(id, _)| keep(&store.get(*id).name)).collect()
}

fn is_generator(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("decoder.")
}

/// Single-channel image tensor `[1, 1, z, y, x]` from a patch's (first) image channel.
pub fn image_tensor(patch: &PatchStack) -> Tensor {
    let [x, y, z] = patch.dims();
    Tensor::new(&[1, 1, z, y, x], patch.image_channel().data().to_vec())
}

/// Train on the manifest's train split with alternating generator and discriminator updates,
/// early-stopping on the validation total loss.
///
/// The discriminator is updated only once the adversarial term is active.
pub fn train_vaegan(data: &BTreeMap<String, PatchStack>, manifest: &Manifest, cfg: &VaeGanConfig) -> Result<VaeGanState> {
    let mut state = VaeGanState::init(cfg.clone())?;
    let lookup = |ids: &[String]| -> Result<Vec<Tensor>> {
        ids.iter()
            .map(|id| {
                let p = data.get(id).ok_or_else(|| invalid(format!("no VAE patch for {id}")))?;
                let t = image_tensor(p);
                state.check_image(&t).map_err(|e| invalid(format!("{id}: {e}")))?;
                Ok(t)
            })
            .collect()
    };
    let train = lookup(manifest.train())?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let val = lookup(manifest.val())?;
    if !val.is_empty() {
        state.initial_val = Some(state.evaluate(&val)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x7ae6_0001);
    let mut gen_opt = Optimizer::new(OptimizerKind::adamw(0.0));
    let mut disc_opt = Optimizer::new(OptimizerKind::adamw(0.0));
    let latent = cfg.latent_shape();
    let w = cfg.weights;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let adversarial = w.adversarial_active(epoch);
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let mut disc_outputs: Vec<f64> = Vec::new();
        let (mut real_sum, mut fake_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let x = Tensor::cat0(&batch.iter().map(|&i| train[i].clone()).collect::<Vec<_>>());
            let eps_len = n * latent[1..].iter().product::<usize>();
            let mut eps_shape = latent.clone();
            eps_shape[0] = n;
            let eps = Tensor::new(&eps_shape, (0..eps_len).map(|_| StandardNormal.sample(&mut rng)).collect());

            let g = Graph::new();
            let ctx = Ctx::new(&g, &state.params);
            let xv = ctx.input(x.clone());
            let (m, lv) = state.net.encode(&ctx, xv);
            let z = m.add(lv.scale(0.5).exp().mul(ctx.input(eps)));
            let xr = state.net.decode(&ctx, z);
            let l = graph_losses(&state.net, &ctx, xv, xr, m, lv);
            let mut total = l.reconstruction.add(l.kl.scale(w.kl)).add(l.perceptual.scale(w.perceptual));
            let mut adv_value = 0.0;
            if adversarial {
                let adv = graph_adversarial(state.net.discriminate(&ctx, xv), state.net.discriminate(&ctx, xr));
                adv_value = adv.value().item();
                total = total.add(adv.scale(w.adversarial));
            }
            let t = total.value().item();
            if !t.is_finite() {
                return Err(Error::Diverged(format!("VAE-GAN epoch {epoch}: generator loss {t}")));
            }
            let bn = n as f64;
            sums.reconstruction += l.reconstruction.value().item() * bn;
            sums.kl += l.kl.value().item() * bn;
            sums.perceptual += l.perceptual.value().item() * bn;
            sums.adversarial += adv_value * bn;
            total_sum += t * bn;
            let grads = g.backward(total);
            let gen = grads_with_prefix(&state.params, ctx.param_grads(&grads), is_generator);
            let fake = (*xr.value()).clone();
            drop(ctx);
            gen_opt.step(&mut state.params, &gen, cfg.generator_lr);

            if adversarial {
                let g = Graph::new();
                let ctx = Ctx::new(&g, &state.params);
                let d_real = state.net.discriminate(&ctx, ctx.input(x));
                let d_fake = state.net.discriminate(&ctx, ctx.input(fake));
                disc_outputs.extend(d_real.value().data());
                disc_outputs.extend(d_fake.value().data());
                real_sum += d_real.value().sum();
                fake_sum += d_fake.value().sum();
                let loss = graph_adversarial(d_real, d_fake).neg();
                let grads = g.backward(loss);
                let disc = grads_with_prefix(&state.params, ctx.param_grads(&grads), |n| n.starts_with("disc."));
                drop(ctx);
                disc_opt.step(&mut state.params, &disc, cfg.discriminator_lr);
            }
        }
        if !state.params.all_finite() {
            return Err(Error::Diverged(format!("VAE-GAN epoch {epoch}: non-finite weights")));
        }
        let nt = train.len() as f64;
        let (disc_real_mean, disc_fake_mean) =
            if adversarial { (Some(real_sum / nt), Some(fake_sum / nt)) } else { (None, None) };
        if adversarial && discriminator_saturated(&disc_outputs, 1e-6) {
            return Err(Error::DiscriminatorCollapse(format!(
                "epoch {epoch}: all {} outputs saturated (mean on real {:.3e}, on reconstructions {:.3e})",
                disc_outputs.len(),
                real_sum / nt,
                fake_sum / nt
            )));
        }
        let train_comp = LossComponents {
            reconstruction: sums.reconstruction / nt,
            kl: sums.kl / nt,
            perceptual: sums.perceptual / nt,
            adversarial: sums.adversarial / nt,
        };
        let (val_comp, val_total) = if val.is_empty() {
            (None, None)
        } else {
            let c = state.evaluate(&val)?;
            (Some(c), Some(vaegan_total_loss(&c, &w, epoch)?))
        };
        state.curve.push(VaeEpoch {
            epoch,
            train: train_comp,
            train_total: total_sum / nt,
            val: val_comp,
            val_total,
            disc_real_mean,
            disc_fake_mean,
        });
        let score = val_total.unwrap_or(total_sum / nt);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, state.params.clone(), epoch));
        } else if let Some((_, _, be)) = &best {
            if epoch - be >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params, epoch)) = best {
        state.params = params;
        state.best_epoch = Some(epoch);
    }
    Ok(state)
}

/// Maps a latent code to an image inside a graph.
pub trait LatentDecoder {
    /// Latent shape for one image, batch axis included.
    fn latent_shape(&self) -> Vec<usize>;
    fn decode_var<'g>(&'g self, g: &'g Graph, z: Var<'g>) -> Var<'g>;
}

/// Deterministic latent code (posterior mean) of an image.
pub trait LatentEncoder {
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor>;
}

/// A classifier seen as a differentiable map from an image to one logit.
pub trait LogitModel {
    fn logit_var<'g>(&'g self, g: &'g Graph, x: Var<'g>) -> Var<'g>;
}

impl LatentDecoder for VaeGanState {
    fn latent_shape(&self) -> Vec<usize> {
        self.config.latent_shape()
    }

    fn decode_var<'g>(&'g self, g: &'g Graph, z: Var<'g>) -> Var<'g> {
        let ctx = Ctx::eval(g, &self.params);
        self.net.decode(&ctx, z)
    }
}

impl LatentEncoder for VaeGanState {
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let m = (*self.net.encode(&ctx, ctx.input(x.clone())).0.value()).clone();
        if !m.is_finite() {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        Ok(m)
    }
}

/// A trained classifier bound to one case's prior channel and clinical row, taking the
/// single-channel image as input.
pub struct ClassifierStack<'a> {
    state: &'a ClassifierState,
    prior: Option<Tensor>,
    clinical: Option<Vec<f64>>,
}

impl<'a> ClassifierStack<'a> {
    /// `patch` is the classifier's full input patch; its prior channel (if any) is held fixed.
    pub fn new(state: &'a ClassifierState, patch: &PatchStack, clinical_raw: Option<&[f64]>) -> Result<Self> {
        state.check_patch(patch)?;
        let prior = match state.config.variant.channel_mode() {
            ChannelMode::ImageOnly => None,
            ChannelMode::DupPlusPrior => {
                let i = patch
                    .roles()
                    .iter()
                    .position(|r| *r == ChannelRole::Prior)
                    .ok_or_else(|| invalid("classifier patch has no prior channel"))?;
                let [x, y, z] = patch.dims();
                Some(Tensor::new(&[1, 1, z, y, x], patch.channel(i).data().to_vec()))
            }
        };
        Ok(Self { state, prior, clinical: state.clinical_input(clinical_raw)? })
    }

    pub fn logit(&self, x: &Tensor) -> Result<f64> {
        prediction_logit(self, x)
    }
}

impl LogitModel for ClassifierStack<'_> {
    fn logit_var<'g>(&'g self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        let ctx = Ctx::eval(g, &self.state.params);
        let input = match &self.prior {
            None => x,
            Some(p) => Var::concat(&[x, x, ctx.input(p.clone())], 1),
        };
        self.state.logit_graph(&ctx, input, self.clinical.as_deref())
    }
}

/// Logit of a model on a fixed image.
pub fn prediction_logit(clf: &impl LogitModel, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v = clf.logit_var(&g, g.constant(x.clone())).value().item();
    if !v.is_finite() {
        return Err(Error::NonFinite("classifier logit".into()));
    }
    Ok(v)
}

/// Identity decoder for a latent of the image's own shape.
#[derive(Clone, Debug)]
pub struct IdentityDecoder {
    pub shape: Vec<usize>,
}

impl LatentDecoder for IdentityDecoder {
    fn latent_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn decode_var<'g>(&'g self, _g: &'g Graph, z: Var<'g>) -> Var<'g> {
        z
    }
}

impl LatentEncoder for IdentityDecoder {
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Elementwise `tanh(gain * z)`: a smooth nonlinear toy decoder.
#[derive(Clone, Debug)]
pub struct TanhDecoder {
    pub shape: Vec<usize>,
    pub gain: f64,
}

impl LatentDecoder for TanhDecoder {
    fn latent_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn decode_var<'g>(&'g self, _g: &'g Graph, z: Var<'g>) -> Var<'g> {
        z.scale(self.gain).tanh()
    }
}

/// `w . x + b`.
#[derive(Clone, Debug)]
pub struct LinearLogit {
    pub weights: Tensor,
    pub bias: f64,
}

impl LogitModel for LinearLogit {
    fn logit_var<'g>(&'g self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.mul(g.constant(self.weights.clone())).sum().offset(self.bias)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Reverse-mode differentiation through decoder and classifier.
    #[default]
    Exact,
    /// Central differences with [`FD_STEP`].
    FiniteDifference,
}

/// Step of the finite-difference gradient.
pub const FD_STEP: f64 = 1e-3;

/// The classifier output being differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    #[default]
    Logit,
    Probability,
}

fn target_value(target: PredictionTarget, logit: f64) -> f64 {
    match target {
        PredictionTarget::Logit => logit,
        PredictionTarget::Probability => sigmoid(logit),
    }
}

/// Gradient of the classifier output on `D(z)` with respect to `z`.
pub fn latent_gradient(
    z: &Tensor,
    decoder: &impl LatentDecoder,
    clf: &impl LogitModel,
    mode: GradientMode,
    target: PredictionTarget,
) -> Result<Tensor> {
    if z.shape() != decoder.latent_shape() {
        return Err(Error::Geometry(format!("latent {:?} vs decoder latent {:?}", z.shape(), decoder.latent_shape())));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("latent code".into()));
    }
    let grad = match mode {
        GradientMode::Exact => {
            let g = Graph::new();
            let zv = g.variable(z.clone());
            let logit = clf.logit_var(&g, decoder.decode_var(&g, zv));
            let out = match target {
                PredictionTarget::Logit => logit,
                PredictionTarget::Probability => logit.sigmoid(),
            };
            g.backward(out.sum()).get_or_zeros(zv)
        }
        GradientMode::FiniteDifference => {
            let f = |zt: Tensor| -> Result<f64> {
                let g = Graph::new();
                let x = (*decoder.decode_var(&g, g.constant(zt)).value()).clone();
                Ok(target_value(target, prediction_logit(clf, &x)?))
            };
            let mut out = vec![0.0; z.numel()];
            for (i, o) in out.iter_mut().enumerate() {
                let mut plus = z.clone();
                plus.data_mut()[i] += FD_STEP;
                let mut minus = z.clone();
                minus.data_mut()[i] -= FD_STEP;
                *o = (f(plus)? - f(minus)?) / (2.0 * FD_STEP);
            }
            Tensor::new(z.shape(), out)
        }
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite("latent gradient".into()));
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One gradient at the posterior mean, scaled by each alpha.
    #[default]
    Linear,
    /// Walk outward from alpha = 0, recomputing the gradient at every step.
    Iterative,
}

/// How the raw latent gradient is scaled before multiplying by alpha.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScaling {
    Raw,
    /// Divide by the gradient's root-mean-square so alpha is in latent-unit steps.
    #[default]
    UnitRms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualConfig {
    /// Strictly increasing and containing 0.
    pub alphas: Vec<f64>,
    pub sweep: SweepMode,
    pub gradient: GradientMode,
    pub target: PredictionTarget,
    pub scaling: StepScaling,
    /// `|p(alpha) - p(0)|` at or above this marks a significant shift.
    pub shift_threshold: f64,
    /// Cases with `|p(x) - p(x_rec)|` at or above this are refused.
    pub fidelity_threshold: f64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            alphas: symmetric_alphas(3.0, 11).expect("valid default grid"),
            sweep: SweepMode::Linear,
            gradient: GradientMode::Exact,
            target: PredictionTarget::Logit,
            scaling: StepScaling::UnitRms,
            shift_threshold: 0.05,
            fidelity_threshold: DEFAULT_FIDELITY_THRESHOLD,
        }
    }
}

pub const DEFAULT_FIDELITY_THRESHOLD: f64 = 0.1;

/// Uniform grid of `points` values over `[-max, max]`; odd counts include 0.
pub fn symmetric_alphas(max: f64, points: usize) -> Result<Vec<f64>> {
    if !(max.is_finite() && max > 0.0) || points < 3 || points % 2 == 0 {
        return Err(invalid(format!("alpha grid needs max > 0 and an odd count >= 3 (got {max}, {points})")));
    }
    let half = (points / 2) as f64;
    Ok((0..points).map(|i| max * (i as f64 - half) / half).collect())
}

pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(invalid("alpha schedule has a non-finite value"));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(format!("alpha schedule {alphas:?} must be strictly increasing")));
    }
    if !alphas.contains(&0.0) {
        return Err(invalid(format!("alpha schedule {alphas:?} must contain 0")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub p_input: f64,
    pub p_reconstruction: f64,
    pub delta_p: f64,
}

impl Fidelity {
    pub fn new(p_input: f64, p_reconstruction: f64) -> Self {
        Self { p_input, p_reconstruction, delta_p: (p_input - p_reconstruction).abs() }
    }

    /// Strict: passes only when `delta_p < threshold`.
    pub fn passes(&self, threshold: f64) -> bool {
        self.delta_p < threshold
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftBounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Outermost alphas on each side of 0 whose prediction moved by at least `threshold`.
pub fn shift_bounds(alphas: &[f64], probabilities: &[f64], threshold: f64) -> Result<ShiftBounds> {
    if alphas.len() != probabilities.len() {
        return Err(invalid("alphas and predictions differ in length"));
    }
    let i0 = alphas.iter().position(|&a| a == 0.0).ok_or_else(|| invalid("alpha schedule must contain 0"))?;
    let p0 = probabilities[i0];
    let shifted = |i: &usize| (probabilities[*i] - p0).abs() >= threshold;
    Ok(ShiftBounds {
        lower: (0..i0).find(shifted).map(|i| alphas[i]),
        upper: (i0 + 1..alphas.len()).rev().find(shifted).map(|i| alphas[i]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub alpha: f64,
    pub logit: f64,
    pub probability: f64,
    pub image: Grid3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl LatentCode {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(invalid("latent code shape does not match its data"));
        }
        Ok(Tensor::new(&self.shape, self.data.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualJob {
    pub case_id: String,
    pub z_orig: LatentCode,
    pub config: CounterfactualConfig,
    pub samples: Vec<CounterfactualSample>,
    pub bounds: ShiftBounds,
    pub fidelity: Fidelity,
}

/// The JSON trace persisted next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTrace {
    pub case_id: String,
    pub alphas: Vec<f64>,
    pub predictions: Vec<f64>,
    pub bounds: ShiftBounds,
    pub fidelity: Fidelity,
}

impl CounterfactualJob {
    pub fn alphas(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.alpha).collect()
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.probability).collect()
    }

    /// The alpha = 0 sample (the reconstruction).
    pub fn reference(&self) -> &CounterfactualSample {
        self.samples.iter().find(|s| s.alpha == 0.0).expect("schedule contains 0")
    }

    pub fn trace(&self) -> CounterfactualTrace {
        CounterfactualTrace {
            case_id: self.case_id.clone(),
            alphas: self.alphas(),
            predictions: self.predictions(),
            bounds: self.bounds,
            fidelity: self.fidelity,
        }
    }

    pub fn heatmaps(&self, x_ref: &Grid3<f64>, aggregate: HeatmapAggregate) -> Result<HeatmapSet> {
        let images: Vec<Grid3<f64>> = self.samples.iter().map(|s| s.image.clone()).collect();
        heatmaps(&images, x_ref, aggregate)
    }
}

fn scaled(grad: Tensor, scaling: StepScaling) -> Tensor {
    match scaling {
        StepScaling::Raw => grad,
        StepScaling::UnitRms => {
            let rms = (grad.data().iter().map(|v| v * v).sum::<f64>() / grad.numel().max(1) as f64).sqrt();
            if rms > 0.0 {
                grad.map(|v| v / rms)
            } else {
                grad
            }
        }
    }
}

fn axpy(z: &Tensor, alpha: f64, d: &Tensor) -> Tensor {
    z.zip_map(d, |a, b| a + alpha * b)
}

fn tensor_to_grid(t: &Tensor) -> Result<Grid3<f64>> {
    let s = t.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Geometry(format!("expected a [1, 1, z, y, x] image, got {s:?}")));
    }
    Grid3::from_vec([s[4], s[3], s[2]], t.data().to_vec())
}

/// Fidelity of one image under a reconstruction model and a classifier.
pub fn case_fidelity<V: LatentEncoder + LatentDecoder>(x: &Tensor, vae: &V, clf: &impl LogitModel) -> Result<Fidelity> {
    let z = vae.encode_mean(x)?;
    let g = Graph::new();
    let x_rec = (*vae.decode_var(&g, g.constant(z)).value()).clone();
    Ok(Fidelity::new(sigmoid(prediction_logit(clf, x)?), sigmoid(prediction_logit(clf, &x_rec)?)))
}

/// Latent sweep around the posterior mean of `x`; refuses cases failing the fidelity gate.
pub fn generate_counterfactuals<V: LatentEncoder + LatentDecoder>(
    case_id: &str,
    x: &Tensor,
    vae: &V,
    clf: &impl LogitModel,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualJob> {
    validate_alphas(&cfg.alphas)?;
    let z0 = vae.encode_mean(x)?;
    let decode = |z: &Tensor| -> Result<(Tensor, f64)> {
        let g = Graph::new();
        let img = (*vae.decode_var(&g, g.constant(z.clone())).value()).clone();
        let logit = prediction_logit(clf, &img)?;
        Ok((img, logit))
    };
    let (x_rec, rec_logit) = decode(&z0)?;
    let fidelity = Fidelity::new(sigmoid(prediction_logit(clf, x)?), sigmoid(rec_logit));
    if !fidelity.passes(cfg.fidelity_threshold) {
        return Err(Error::FidelityGate { delta_p: fidelity.delta_p, threshold: cfg.fidelity_threshold });
    }
    let grad_at = |z: &Tensor| -> Result<Tensor> {
        Ok(scaled(latent_gradient(z, vae, clf, cfg.gradient, cfg.target)?, cfg.scaling))
    };
    let i0 = cfg.alphas.iter().position(|&a| a == 0.0).expect("validated");
    let mut latents: Vec<Option<Tensor>> = vec![None; cfg.alphas.len()];
    latents[i0] = Some(z0.clone());
    if cfg.alphas.len() > 1 {
        match cfg.sweep {
            SweepMode::Linear => {
                let d = grad_at(&z0)?;
                for (i, &a) in cfg.alphas.iter().enumerate() {
                    if i != i0 {
                        latents[i] = Some(axpy(&z0, a, &d));
                    }
                }
            }
            SweepMode::Iterative => {
                for side in [(i0 + 1..cfg.alphas.len()).collect::<Vec<_>>(), (0..i0).rev().collect()] {
                    let (mut z, mut prev) = (z0.clone(), 0.0);
                    for i in side {
                        let a = cfg.alphas[i];
                        z = axpy(&z, a - prev, &grad_at(&z)?);
                        prev = a;
                        latents[i] = Some(z.clone());
                    }
                }
            }
        }
    }
    let mut samples = Vec::with_capacity(cfg.alphas.len());
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let (img, logit) = if i == i0 { (x_rec.clone(), rec_logit) } else { decode(latents[i].as_ref().expect("filled"))? };
        samples.push(CounterfactualSample { alpha, logit, probability: sigmoid(logit), image: tensor_to_grid(&img)? });
    }
    let probs: Vec<f64> = samples.iter().map(|s| s.probability).collect();
    Ok(CounterfactualJob {
        case_id: case_id.to_string(),
        z_orig: LatentCode::from_tensor(&z0),
        config: cfg.clone(),
        bounds: shift_bounds(&cfg.alphas, &probs, cfg.shift_threshold)?,
        samples,
        fidelity,
    })
}

/// Histogram of prediction differences with fixed-width bins and a final overflow bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub bin_width: f64,
    /// Lower edge of the overflow bin.
    pub overflow_from: f64,
    pub counts: Vec<usize>,
}

impl DeltaHistogram {
    pub const BIN_WIDTH: f64 = 0.02;
    pub const OVERFLOW_FROM: f64 = 0.3;

    pub fn from_deltas(deltas: &[f64]) -> Self {
        let w = Self::BIN_WIDTH;
        let regular = (Self::OVERFLOW_FROM / w).round() as usize;
        let mut counts = vec![0; regular + 1];
        for &d in deltas {
            // nudge so exact edges such as 0.06 land in the upper bin despite rounding
            let idx = ((d / w) + 1e-9).floor();
            let idx = if idx.is_finite() && idx >= 0.0 { (idx as usize).min(regular) } else { regular };
            counts[idx] += 1;
        }
        Self { bin_width: w, overflow_from: Self::OVERFLOW_FROM, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFidelity {
    pub case_id: String,
    #[serde(flatten)]
    pub fidelity: Fidelity,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub threshold: f64,
    pub cases: Vec<CaseFidelity>,
    pub histogram: DeltaHistogram,
}

impl FidelityReport {
    pub fn from_cases(cases: Vec<(String, Fidelity)>, threshold: f64) -> Self {
        let histogram = DeltaHistogram::from_deltas(&cases.iter().map(|(_, f)| f.delta_p).collect::<Vec<_>>());
        let cases = cases
            .into_iter()
            .map(|(case_id, fidelity)| CaseFidelity { passed: fidelity.passes(threshold), case_id, fidelity })
            .collect();
        Self { threshold, cases, histogram }
    }

    pub fn passed(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| c.passed).map(|c| c.case_id.as_str()).collect()
    }

    pub fn failed(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.case_id.as_str()).collect()
    }
}

/// Fidelity of every case, each with its own classifier binding.
pub fn reconstruction_fidelity<V, C>(
    cases: impl IntoIterator<Item = (String, Tensor, C)>,
    vae: &V,
    threshold: f64,
) -> Result<FidelityReport>
where
    V: LatentEncoder + LatentDecoder,
    C: LogitModel,
{
    let mut out = Vec::new();
    for (id, x, clf) in cases {
        out.push((id, case_fidelity(&x, vae, &clf)?));
    }
    Ok(FidelityReport::from_cases(out, threshold))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapAggregate {
    /// Mean absolute difference over the counterfactuals.
    #[default]
    Mean,
    /// Voxelwise minimum: only regions modified in every counterfactual.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSet {
    pub kind: HeatmapAggregate,
    pub aggregate: Grid3<f64>,
    pub sequential: Vec<Grid3<f64>>,
}

/// Aggregate difference map against `x_ref` and differences between consecutive images.
pub fn heatmaps(images: &[Grid3<f64>], x_ref: &Grid3<f64>, kind: HeatmapAggregate) -> Result<HeatmapSet> {
    if images.is_empty() {
        return Err(invalid("heatmaps need at least one counterfactual"));
    }
    if let Some(g) = images.iter().find(|g| g.dims() != x_ref.dims()) {
        return Err(Error::Geometry(format!("counterfactual dims {:?} vs reference {:?}", g.dims(), x_ref.dims())));
    }
    let n = x_ref.len();
    let mut agg = vec![if kind == HeatmapAggregate::Min { f64::INFINITY } else { 0.0 }; n];
    for img in images {
        for (i, a) in agg.iter_mut().enumerate() {
            let d = (img.data()[i] - x_ref.data()[i]).abs();
            match kind {
                HeatmapAggregate::Mean => *a += d,
                HeatmapAggregate::Min => *a = a.min(d),
            }
        }
    }
    if kind == HeatmapAggregate::Mean {
        agg.iter_mut().for_each(|a| *a /= images.len() as f64);
    }
    let sequential = images
        .windows(2)
        .map(|w| Grid3::from_vec(w[0].dims(), w[0].data().iter().zip(w[1].data()).map(|(a, b)| (b - a).abs()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapSet { kind, aggregate: Grid3::from_vec(x_ref.dims(), agg)?, sequential })
}

/// Voxel `(x, y, z)` of the largest value; the first one on ties.
pub fn peak_voxel(grid: &Grid3<f64>) -> Option<[usize; 3]> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in grid.data().iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| grid.coords(i))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayNorm {
    /// One min-max range over the volume.
    #[default]
    Volume,
    /// Min-max per axial slice.
    Slice,
}

/// Rescale to `[0, 1]` for display; constant regions map to 0.
pub fn normalize_for_display(grid: &Grid3<f64>, norm: DisplayNorm) -> Grid3<f64> {
    let [nx, ny, nz] = grid.dims();
    let plane = nx * ny;
    let mut out = grid.clone();
    let ranges: Vec<(usize, usize)> = match norm {
        DisplayNorm::Volume => vec![(0, grid.len())],
        DisplayNorm::Slice => (0..nz).map(|z| (z * plane, (z + 1) * plane)).collect(),
    };
    for (a, b) in ranges {
        let s = &mut out.data_mut()[a..b];
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        s.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    }
    out
}
