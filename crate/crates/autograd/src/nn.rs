//! Layer building blocks. Layers hold parameter ids; values live in a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// He-normal initialised tensor for a layer with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[inputs, outputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, outputs]));
        Self { weight, bias, inputs, outputs }
    }

    /// `[batch, inputs] -> [batch, outputs]`
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(ctx.param(self.weight)).add(ctx.param(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    /// Convolution with "same"-style padding `k / 2` on each axis.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Self { weight, bias, kernel, stride, pad }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.conv3d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.stride, self.pad)
    }
}

/// Instance normalisation with a learned per-channel affine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, channels, 1, 1, 1], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, channels, 1, 1, 1]));
        Self { gamma, beta, channels }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.instance_norm(1e-5).mul(ctx.param(self.gamma)).add(ctx.param(self.beta))
    }
}

/// Squeeze-and-excitation channel gating for `[n, c, d, h, w]` maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / ratio).max(1);
        Self {
            reduce: Linear::new(store, &format!("{name}.reduce"), channels, hidden, rng),
            expand: Linear::new(store, &format!("{name}.expand"), hidden, channels, rng),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let pooled = x.mean_axes(&[2, 3, 4]).reshape(&[s[0], s[1]]);
        let gate = self.expand.forward(ctx, self.reduce.forward(ctx, pooled).relu()).sigmoid();
        x.mul(gate.reshape(&[s[0], s[1], 1, 1, 1]))
    }
}
