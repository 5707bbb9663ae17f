//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vbiopsy_core::imaging::{
    apply_spatial, augment, encode_prior, AppliedTransform, AugmentationConfig, ChannelRole, Geometry, Grid3,
    LabelMask, LabelScheme, PatchStack,
};
use vbiopsy_core::trial::{Decision, Experience, Phase, ProtocolError, ReaderSession, ReadingEntry, TrialEvent};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// AUC by counting every (positive, negative) pair.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random scores (with deliberate ties) and labels holding both classes.
pub fn random_scored(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

pub fn random_mask(r: &mut ChaCha8Rng, dims: [usize; 3], scheme: LabelScheme, density: f64) -> LabelMask {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| if r.random::<f64>() < density { r.random_range(1..=scheme.max_label()) } else { 0 })
        .collect();
    LabelMask::new(Grid3::from_vec(dims, data).unwrap(), scheme, Geometry::with_spacing([1.0, 1.0, 2.0]).unwrap())
        .unwrap()
}

/// DSC from explicit voxel-index sets.
pub fn dice_oracle(a: &LabelMask, b: &LabelMask, label: u8) -> f64 {
    let set = |m: &LabelMask| -> BTreeSet<usize> {
        m.grid.data().iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| i).collect()
    };
    let (sa, sb) = (set(a), set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Largest 26-connected component per label via recursive flood fill.
///
/// Ties go to the component containing the lowest voxel index.
pub fn largest_component_oracle(m: &LabelMask) -> Grid3<u8> {
    let [nx, ny, nz] = m.dims();
    let g = &m.grid;
    let mut comp_of = vec![usize::MAX; g.len()];
    let mut sizes: Vec<(u8, usize, usize)> = Vec::new(); // (label, size, first index)

    fn fill(g: &Grid3<u8>, comp_of: &mut [usize], id: usize, label: u8, x: i64, y: i64, z: i64, size: &mut usize) {
        if g.get_checked(x, y, z) != Some(label) {
            return;
        }
        let i = g.index(x as usize, y as usize, z as usize);
        if comp_of[i] != usize::MAX {
            return;
        }
        comp_of[i] = id;
        *size += 1;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    fill(g, comp_of, id, label, x + dx, y + dy, z + dz, size);
                }
            }
        }
    }

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                let label = g.data()[i];
                if label == 0 || comp_of[i] != usize::MAX {
                    continue;
                }
                let id = sizes.len();
                let mut size = 0;
                fill(g, &mut comp_of, id, label, x as i64, y as i64, z as i64, &mut size);
                sizes.push((label, size, i));
            }
        }
    }
    let mut keep: BTreeMap<u8, usize> = BTreeMap::new();
    for (id, &(label, size, first)) in sizes.iter().enumerate() {
        match keep.get(&label) {
            Some(&k) if sizes[k].1 > size || (sizes[k].1 == size && sizes[k].2 < first) => {}
            _ => {
                keep.insert(label, id);
            }
        }
    }
    let kept: BTreeSet<usize> = keep.values().copied().collect();
    let data = comp_of.iter().zip(g.data()).map(|(c, &v)| if kept.contains(c) { v } else { 0 }).collect();
    Grid3::from_vec(m.dims(), data).unwrap()
}

/// A few separated blobs of random size on a small grid.
pub fn random_blobs(r: &mut ChaCha8Rng, dims: [usize; 3], scheme: LabelScheme) -> LabelMask {
    let mut g = Grid3::filled(dims, 0u8);
    for _ in 0..r.random_range(1..6) {
        let label = r.random_range(1..=scheme.max_label());
        let c = [0, 1, 2].map(|a| r.random_range(0..dims[a]) as i64);
        let rad = r.random_range(0..3i64);
        for z in c[2] - rad..=c[2] + rad {
            for y in c[1] - rad..=c[1] + rad {
                for x in c[0] - rad..=c[0] + rad {
                    if g.get_checked(x, y, z).is_some() && r.random::<f64>() < 0.8 {
                        g.set(x as usize, y as usize, z as usize, label);
                    }
                }
            }
        }
    }
    LabelMask::new(g, scheme, Geometry::with_spacing([1.0; 3]).unwrap()).unwrap()
}

/// `[image, image, prior]` patch with a textured image and an ellipsoidal binary prior.
pub fn prior_patch(seed: u64, dims: [usize; 3]) -> PatchStack {
    let mut r = rng(seed);
    let n: usize = dims.iter().product();
    let image = Grid3::from_vec(dims, (0..n).map(|_| r.random::<f64>() * 4.0 - 1.0).collect()).unwrap();
    let c = dims.map(|d| d as f64 / 2.0 + r.random::<f64>() - 0.5);
    let axes = dims.map(|d| d as f64 * (0.2 + 0.15 * r.random::<f64>()));
    let mut prior = Grid3::filled(dims, 0.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                if (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum::<f64>() <= 1.0 {
                    prior.set(x, y, z, 1.0);
                }
            }
        }
    }
    let mask = LabelMask::new(prior.map(|v| v as u8), LabelScheme::Gland, Geometry::with_spacing([1.0; 3]).unwrap()).unwrap();
    PatchStack::new(
        vec![image.clone(), image, encode_prior(&mask)],
        vec![ChannelRole::Image, ChannelRole::Image, ChannelRole::Prior],
        [1.0; 3],
        [0; 3],
    )
    .unwrap()
}

/// Checks one augmentation draw: prior channels untouched by intensity transforms and moved by
/// exactly the same spatial ops as the image. Returns a description of the first violation.
pub fn check_prior_hygiene(patch: &PatchStack, cfg: &AugmentationConfig) -> Result<(), String> {
    let out = augment(patch, cfg).map_err(|e| e.to_string())?;
    let spatial: Vec<_> = out
        .applied
        .iter()
        .filter_map(|t| match t {
            AppliedTransform::Spatial(op) => Some(op.clone()),
            _ => None,
        })
        .collect();
    // Same draw with every intensity transform switched off: the random stream is unchanged.
    let mut spatial_only = cfg.clone();
    spatial_only.gaussian_noise.prob = 0.0;
    spatial_only.gaussian_smooth.prob = 0.0;
    spatial_only.scale_intensity.prob = 0.0;
    spatial_only.contrast.prob = 0.0;
    spatial_only.bias_field.prob = 0.0;
    spatial_only.gibbs.prob = 0.0;
    let geo = augment(patch, &spatial_only).map_err(|e| e.to_string())?;
    for (i, role) in patch.roles().iter().enumerate() {
        let nearest = *role == ChannelRole::Prior;
        let mut expected = patch.channel(i).clone();
        for op in &spatial {
            expected = apply_spatial(&expected, op, nearest);
        }
        if nearest {
            if out.patch.channel(i).data() != expected.data() {
                return Err(format!("prior channel {i} differs from its co-transformed reference under {:?}", out.applied));
            }
            if spatial.is_empty() && out.patch.channel(i).data() != patch.channel(i).data() {
                return Err(format!("prior channel {i} changed without a spatial transform"));
            }
        } else if geo.patch.channel(i).data() != expected.data() {
            return Err(format!("image channel {i} not moved by the recorded spatial ops"));
        }
    }
    Ok(())
}

/// Session fixture whose unaided and assisted accuracies are 0.72 and 0.77 and whose mean reading
/// times are 318 s and 186 s.
pub fn trial_fixture() -> (Vec<ReaderSession>, BTreeMap<String, Decision>, BTreeMap<String, Decision>) {
    let cases: Vec<String> = (0..25).map(|i| format!("case-{i:02}")).collect();
    let truth: BTreeMap<String, Decision> =
        cases.iter().enumerate().map(|(i, c)| (c.clone(), Decision::from_high(i % 2 == 0))).collect();
    let flip = |d: Decision| if d == Decision::High { Decision::Low } else { Decision::High };
    // correct reads per reader (25 cases each): unaided 18 x 4 = 72 %, assisted 19, 19, 19, 20 -> 77 %
    let unaided_correct = [18, 18, 18, 18];
    let assisted_correct = [19, 19, 19, 20];
    let experience = [Experience::Under5, Experience::From5To10, Experience::Over10, Experience::Over10];
    let mut sessions = Vec::new();
    for r in 0..4 {
        for (phase, correct, times) in
            [(Phase::Unaided, unaided_correct[r], (258.0, 378.0)), (Phase::AiAssisted, assisted_correct[r], (126.0, 246.0))]
        {
            let entries = cases
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    // errors are spread over different cases for different readers
                    let wrong = (i + 5 * r) % 25 >= correct;
                    let t = truth[c];
                    // alternating times average to the midpoint; the odd 25th entry takes the midpoint itself
                    let elapsed = if i == 24 { (times.0 + times.1) / 2.0 } else if i % 2 == 0 { times.0 } else { times.1 };
                    ReadingEntry {
                        case_id: c.clone(),
                        decision: if wrong { flip(t) } else { t },
                        elapsed_seconds: elapsed,
                        ai_prediction_shown: phase == Phase::AiAssisted,
                    }
                })
                .collect();
            sessions.push(ReaderSession { reader_id: format!("reader-{r}"), experience: experience[r], phase, entries });
        }
    }
    let ai = cases.iter().enumerate().map(|(i, c)| (c.clone(), if i < 20 { truth[c] } else { flip(truth[c]) })).collect();
    (sessions, truth, ai)
}

/// Reference model of the per-reader protocol, written as a flat table of stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Enrolled,
    ReadingUnaided(i64),
    Washout(i64),
    ReadingAssisted(i64),
    Done,
}

#[derive(Default)]
pub struct PhaseOracle {
    pub washout: i64,
    pub readers: BTreeMap<String, Stage>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    RejectUnknown,
    RejectDuplicate,
    RejectWashout(i64),
    RejectIllegal,
}

impl PhaseOracle {
    pub fn new(washout: i64) -> Self {
        Self { washout, readers: BTreeMap::new() }
    }

    pub fn step(&mut self, ev: &TrialEvent) -> Verdict {
        match ev {
            TrialEvent::Enroll { reader, .. } => {
                if self.readers.contains_key(reader) {
                    return Verdict::RejectDuplicate;
                }
                self.readers.insert(reader.clone(), Stage::Enrolled);
                Verdict::Accept
            }
            TrialEvent::Start { reader, phase, at } => {
                let Some(s) = self.readers.get_mut(reader) else { return Verdict::RejectUnknown };
                match (*s, phase) {
                    (Stage::Enrolled, Phase::Unaided) => *s = Stage::ReadingUnaided(*at),
                    (Stage::Washout(until), Phase::AiAssisted) if *at < until => return Verdict::RejectWashout(until),
                    (Stage::Washout(_), Phase::AiAssisted) => *s = Stage::ReadingAssisted(*at),
                    _ => return Verdict::RejectIllegal,
                }
                Verdict::Accept
            }
            TrialEvent::Finalize { reader, phase, at } => {
                let w = self.washout;
                let Some(s) = self.readers.get_mut(reader) else { return Verdict::RejectUnknown };
                match (*s, phase) {
                    (Stage::ReadingUnaided(t0), Phase::Unaided) if *at >= t0 => *s = Stage::Washout(at + w),
                    (Stage::ReadingAssisted(t0), Phase::AiAssisted) if *at >= t0 => *s = Stage::Done,
                    _ => return Verdict::RejectIllegal,
                }
                Verdict::Accept
            }
        }
    }
}

pub fn verdict_of(res: &Result<(), ProtocolError>) -> Verdict {
    match res {
        Ok(()) => Verdict::Accept,
        Err(ProtocolError::UnknownReader(_)) => Verdict::RejectUnknown,
        Err(ProtocolError::AlreadyEnrolled(_)) => Verdict::RejectDuplicate,
        Err(ProtocolError::Washout { deadline, .. }) => Verdict::RejectWashout(*deadline),
        Err(ProtocolError::IllegalTransition { .. }) => Verdict::RejectIllegal,
    }
}

/// Random event stream over a few readers with a monotone-ish clock.
pub fn random_events(r: &mut ChaCha8Rng, len: usize) -> Vec<TrialEvent> {
    let mut t = 0i64;
    (0..len)
        .map(|_| {
            t += r.random_range(-5..40);
            let reader = format!("r{}", r.random_range(0..4));
            let phase = if r.random::<bool>() { Phase::Unaided } else { Phase::AiAssisted };
            match r.random_range(0..5) {
                0 => TrialEvent::Enroll { reader, experience: Experience::Under5 },
                1 | 2 => TrialEvent::Start { reader, phase, at: t },
                _ => TrialEvent::Finalize { reader, phase, at: t },
            }
        })
        .collect()
}

/// Normwise relative difference `|a - b| / max(|a|, |b|)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error between reverse-mode and central-difference gradients of a summed
/// classifier loss with respect to the weights and bias of a linear head, over `trials` draws.
pub fn loss_gradient_error(kind: vbiopsy_core::classifier::LossKind, trials: usize, seed: u64) -> f64 {
    use vbiopsy_autograd::{Graph, Tensor};
    let mut r = rng(seed);
    let (n, k) = (6, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = Tensor::new(&[n, k], (0..n * k).map(|_| r.random::<f64>() * 2.0 - 1.0).collect());
        let y = Tensor::new(&[n, 1], (0..n).map(|i| f64::from(u8::from(i % 2 == 0 || r.random::<bool>()))).collect());
        let w = Tensor::new(&[k, 1], (0..k).map(|_| r.random::<f64>() * 2.0 - 1.0).collect());
        let b = Tensor::new(&[1, 1], vec![r.random::<f64>() - 0.5]);
        let loss = |w: &Tensor, b: &Tensor| -> f64 {
            let g = Graph::new();
            let logits = g.constant(x.clone()).matmul(g.constant(w.clone())).add(g.constant(b.clone()));
            kind.batch_sum(logits, g.constant(y.clone())).value().item()
        };
        let g = Graph::new();
        let (wv, bv) = (g.variable(w.clone()), g.variable(b.clone()));
        let out = kind.batch_sum(g.constant(x.clone()).matmul(wv).add(bv), g.constant(y.clone()));
        let grads = g.backward(out);
        let mut exact = grads.get_or_zeros(wv).into_data();
        exact.extend(grads.get_or_zeros(bv).into_data());
        let h = 1e-3;
        let mut fd = Vec::new();
        for i in 0..k + 1 {
            let bump = |d: f64| {
                let (mut w2, mut b2) = (w.clone(), b.clone());
                if i < k {
                    w2.data_mut()[i] += d;
                } else {
                    b2.data_mut()[0] += d;
                }
                loss(&w2, &b2)
            };
            fd.push((bump(h) - bump(-h)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&exact, &fd));
    }
    worst
}

/// Toy decoder/classifier stacks used for the latent-gradient checks.
pub fn toy_linear(r: &mut ChaCha8Rng, shape: &[usize]) -> vbiopsy_core::counterfactual::LinearLogit {
    let n: usize = shape.iter().product();
    vbiopsy_core::counterfactual::LinearLogit {
        weights: vbiopsy_autograd::Tensor::new(shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()),
        bias: r.random::<f64>() - 0.5,
    }
}

/// Worst exact-vs-finite-difference latent gradient error over `trials` random latents.
pub fn latent_gradient_error(trials: usize, seed: u64) -> f64 {
    use vbiopsy_core::counterfactual::{latent_gradient, GradientMode, IdentityDecoder, PredictionTarget, TanhDecoder};
    let mut r = rng(seed);
    let shape = vec![1, 1, 2, 3, 3];
    let n: usize = shape.iter().product();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let clf = toy_linear(&mut r, &shape);
        let z = vbiopsy_autograd::Tensor::new(&shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect());
        let target = if t % 2 == 0 { PredictionTarget::Logit } else { PredictionTarget::Probability };
        let tanh = TanhDecoder { shape: shape.clone(), gain: 0.5 + r.random::<f64>() };
        let ident = IdentityDecoder { shape: shape.clone() };
        let pairs = [
            (
                latent_gradient(&z, &tanh, &clf, GradientMode::Exact, target).unwrap(),
                latent_gradient(&z, &tanh, &clf, GradientMode::FiniteDifference, target).unwrap(),
            ),
            (
                latent_gradient(&z, &ident, &clf, GradientMode::Exact, target).unwrap(),
                latent_gradient(&z, &ident, &clf, GradientMode::FiniteDifference, target).unwrap(),
            ),
        ];
        for (a, b) in pairs {
            worst = worst.max(rel_err(a.data(), b.data()));
        }
    }
    worst
}

/// Encoder is the identity; decoder adds a constant, so the reconstruction gap is set by hand.
pub struct ShiftedVae {
    pub shape: Vec<usize>,
    pub shift: f64,
}

impl vbiopsy_core::counterfactual::LatentDecoder for ShiftedVae {
    fn latent_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn decode_var<'g>(&'g self, _g: &'g vbiopsy_autograd::Graph, z: vbiopsy_autograd::Var<'g>) -> vbiopsy_autograd::Var<'g> {
        z.offset(self.shift)
    }
}

impl vbiopsy_core::counterfactual::LatentEncoder for ShiftedVae {
    fn encode_mean(&self, x: &vbiopsy_autograd::Tensor) -> vbiopsy_core::Result<vbiopsy_autograd::Tensor> {
        Ok(x.clone())
    }
}

/// Worst relative gap between `vaegan_total_loss` and an independently written weighted sum,
/// over random components, weights and epochs on both sides of the warm-up boundary.
pub fn total_loss_error(trials: usize, seed: u64) -> f64 {
    use vbiopsy_core::counterfactual::{vaegan_total_loss, LossComponents, LossWeights};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let c = LossComponents {
            reconstruction: r.random::<f64>() * 5.0,
            kl: r.random::<f64>() * 1e4,
            perceptual: r.random::<f64>() * 50.0,
            adversarial: -r.random::<f64>() * 10.0,
        };
        let w = LossWeights {
            kl: r.random::<f64>() * 1e-3,
            perceptual: r.random::<f64>() * 1e-2,
            adversarial: r.random::<f64>() * 1e-1,
            warmup_epochs: r.random_range(0..20),
        };
        // alternate between warm-up and adversarial epochs
        let epoch = if t % 2 == 0 { w.warmup_epochs.saturating_sub(1 + r.random_range(0..3)) } else { w.warmup_epochs + r.random_range(0..5) };
        let adv_on = epoch >= w.warmup_epochs;
        let expected = c.reconstruction + w.kl * c.kl + w.perceptual * c.perceptual + if adv_on { w.adversarial * c.adversarial } else { 0.0 };
        let got = vaegan_total_loss(&c, &w, epoch).unwrap();
        worst = worst.max((got - expected).abs() / expected.abs().max(1e-12));
    }
    worst
}

/// Closed-form Gaussian KL against a Monte-Carlo estimate; returns (closed, estimate, standard error).
pub fn kl_monte_carlo(seed: u64, dims: usize, samples: usize) -> (f64, f64, f64) {
    use rand_distr::{Distribution, StandardNormal};
    use vbiopsy_core::counterfactual::Posterior;
    let mut r = rng(seed);
    let mean: Vec<f64> = (0..dims).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let std: Vec<f64> = (0..dims).map(|_| 0.3 + r.random::<f64>() * 1.5).collect();
    let closed = Posterior::from_std(mean.clone(), &std).unwrap().kl_to_standard_normal();
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for d in 0..dims {
            let e: f64 = StandardNormal.sample(&mut r);
            let z = mean[d] + std[d] * e;
            // log q(z) - log p(z); the 2 pi terms cancel
            log_ratio += -0.5 * e * e - std[d].ln() + 0.5 * z * z;
        }
        vals.push(log_ratio);
    }
    let n = samples as f64;
    let est = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - est).powi(2)).sum::<f64>() / (n - 1.0);
    (closed, est, (var / n).sqrt())
}

/// Largest |p(alpha = 0) - p(reconstruction)| over a few stacks when the schedule is `{0}`.
pub fn alpha_zero_gap() -> f64 {
    use vbiopsy_core::counterfactual::{
        case_fidelity, generate_counterfactuals, CounterfactualConfig, VaeGanConfig, VaeGanState,
    };
    let mut r = rng(21);
    let cfg = CounterfactualConfig { alphas: vec![0.0], fidelity_threshold: 2.0, ..Default::default() };
    let mut worst: f64 = 0.0;

    let vae = VaeGanState::init(VaeGanConfig::desk()).unwrap();
    let shape = vae.config.image_shape();
    let n: usize = shape.iter().product();
    for _ in 0..3 {
        let clf = toy_linear(&mut r, &shape);
        let x = vbiopsy_autograd::Tensor::new(&shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect());
        let job = generate_counterfactuals("toy", &x, &vae, &clf, &cfg).unwrap();
        let fid = case_fidelity(&x, &vae, &clf).unwrap();
        assert_eq!(job.samples.len(), 1);
        worst = worst.max((job.samples[0].probability - fid.p_reconstruction).abs());
    }

    let shape = vec![1, 1, 2, 3, 3];
    let clf = toy_linear(&mut r, &shape);
    let x = vbiopsy_autograd::Tensor::new(&shape, (0..18).map(|_| r.random::<f64>()).collect());
    let shifted = ShiftedVae { shape: shape.clone(), shift: 0.01 };
    let job = generate_counterfactuals("toy", &x, &shifted, &clf, &cfg).unwrap();
    worst = worst.max((job.samples[0].probability - case_fidelity(&x, &shifted, &clf).unwrap().p_reconstruction).abs());
    worst
}

/// Predictions along the alpha grid on identity-decoder + linear-logit stacks are strictly
/// increasing, and the logits follow the closed form `l0 + alpha * |w|^2 / s`.
pub fn linear_monotone_check(trials: usize, seed: u64) -> Result<(), String> {
    use vbiopsy_core::counterfactual::{
        generate_counterfactuals, CounterfactualConfig, IdentityDecoder, StepScaling, SweepMode,
    };
    let mut r = rng(seed);
    let shape = vec![1, 1, 2, 3, 4];
    let n: usize = shape.iter().product();
    for t in 0..trials {
        let mut clf = toy_linear(&mut r, &shape);
        clf.weights = clf.weights.map(|w| w * 0.2);
        let x = vbiopsy_autograd::Tensor::new(&shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect());
        let scaling = if t % 2 == 0 { StepScaling::UnitRms } else { StepScaling::Raw };
        let sweep = if t % 3 == 0 { SweepMode::Iterative } else { SweepMode::Linear };
        let cfg = CounterfactualConfig { scaling, sweep, ..Default::default() };
        let job = generate_counterfactuals("lin", &x, &IdentityDecoder { shape: shape.clone() }, &clf, &cfg)
            .map_err(|e| e.to_string())?;
        let p = job.predictions();
        if p.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("trial {t}: predictions not strictly increasing: {p:?}"));
        }
        let w2: f64 = clf.weights.data().iter().map(|w| w * w).sum();
        let step = match scaling {
            StepScaling::Raw => w2,
            StepScaling::UnitRms => w2 / (w2 / n as f64).sqrt(),
        };
        let l0 = job.reference().logit;
        for s in &job.samples {
            let expected = l0 + s.alpha * step;
            if (s.logit - expected).abs() > 1e-9 * expected.abs().max(1.0) {
                return Err(format!("trial {t}: logit {} at alpha {} vs closed form {expected}", s.logit, s.alpha));
            }
        }
    }
    Ok(())
}

/// Builds cases with prescribed reconstruction gaps around 0.1 and checks the gate splits them
/// exactly at the threshold, both in the fidelity report and when generating counterfactuals.
pub fn fidelity_partition_check() -> Result<(), String> {
    use vbiopsy_autograd::sigmoid;
    use vbiopsy_core::classifier::logit;
    use vbiopsy_core::counterfactual::{
        generate_counterfactuals, reconstruction_fidelity, CounterfactualConfig, LinearLogit, DEFAULT_FIDELITY_THRESHOLD,
    };
    use vbiopsy_core::Error;
    let shape = vec![1, 1, 1, 2, 2];
    let gaps = [0.0, 0.02, 0.05, 0.09, 0.0999, 0.1001, 0.11, 0.2, 0.35];
    let bias = -0.8;
    let clf = LinearLogit { weights: vbiopsy_autograd::Tensor::full(&shape, 0.25), bias };
    let x = vbiopsy_autograd::Tensor::zeros(&shape);
    let mut report_cases = Vec::new();
    for (i, &gap) in gaps.iter().enumerate() {
        // logit moves by `shift` (four voxels at weight 0.25)
        let shift = logit(sigmoid(bias) + gap) - bias;
        let vae = ShiftedVae { shape: shape.clone(), shift };
        let report = reconstruction_fidelity([(format!("c{i}"), x.clone(), clf.clone())], &vae, DEFAULT_FIDELITY_THRESHOLD)
            .map_err(|e| e.to_string())?;
        let c = &report.cases[0];
        if (c.fidelity.delta_p - gap).abs() > 1e-9 {
            return Err(format!("case {i}: delta {} vs constructed {gap}", c.fidelity.delta_p));
        }
        let expect_pass = gap < 0.1;
        if c.passed != expect_pass {
            return Err(format!("gap {gap}: passed = {}", c.passed));
        }
        let job = generate_counterfactuals("c", &x, &vae, &clf, &CounterfactualConfig::default());
        match (&job, expect_pass) {
            (Ok(_), true) => {}
            (Err(Error::FidelityGate { delta_p, .. }), false) if (delta_p - gap).abs() < 1e-9 => {}
            _ => return Err(format!("gap {gap}: generation returned {:?}", job.as_ref().map(|_| ()))),
        }
        report_cases.push((format!("c{i}"), c.fidelity));
    }
    let report = vbiopsy_core::counterfactual::FidelityReport::from_cases(report_cases, DEFAULT_FIDELITY_THRESHOLD);
    if report.passed().len() != 5 || report.failed().len() != 4 || report.histogram.total() != gaps.len() {
        return Err(format!("partition {:?} / {:?}", report.passed(), report.failed()));
    }
    Ok(())
}

/// Runs `sequences` random event streams through the phase machine and the reference model,
/// returning the first disagreement.
pub fn phase_machine_check(sequences: usize, seed: u64) -> Result<usize, String> {
    use vbiopsy_core::trial::{ReaderStatus, TrialState};
    let mut r = rng(seed);
    let mut rejected = 0;
    for s in 0..sequences {
        let washout = r.random_range(0..120);
        let mut machine = TrialState::new("t", vec!["a".into()], washout).unwrap();
        let mut oracle = PhaseOracle::new(washout);
        for (k, ev) in random_events(&mut r, 40).iter().enumerate() {
            let got = verdict_of(&machine.apply(ev));
            let want = oracle.step(ev);
            if got != want {
                return Err(format!("sequence {s} event {k} {ev:?}: machine {got:?}, reference {want:?}"));
            }
            if got != Verdict::Accept {
                rejected += 1;
            }
            for (reader, stage) in &oracle.readers {
                let status = &machine.readers[reader].status;
                let same = match (stage, status) {
                    (Stage::Enrolled, ReaderStatus::Enrolled) => true,
                    (Stage::ReadingUnaided(t), ReaderStatus::Reading { phase: Phase::Unaided, started_at }) => t == started_at,
                    (Stage::Washout(u), ReaderStatus::Washout { washout_until, .. }) => u == washout_until,
                    (Stage::ReadingAssisted(t), ReaderStatus::Reading { phase: Phase::AiAssisted, started_at }) => t == started_at,
                    (Stage::Done, ReaderStatus::Completed { .. }) => true,
                    _ => false,
                };
                if !same {
                    return Err(format!("sequence {s} event {k}: {reader} is {status:?}, reference {stage:?}"));
                }
            }
        }
    }
    Ok(rejected)
}
