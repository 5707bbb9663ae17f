use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbiopsy_autograd::{Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compare reverse-mode gradients of `f` at each input with central differences.
fn check(inputs: Vec<Tensor>, f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let gg = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        gg.constant(t)
                    })
                    .collect();
                f(&gg, &vs).value().item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let tol = 1e-5 * (1.0 + fd.abs().max(a.abs()));
            assert!((fd - a).abs() < tol, "input {k} element {i}: analytic {a} vs fd {fd}");
        }
    }
}

fn weights(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduce a tensor to a scalar with fixed random weights so every element matters.
fn project<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Var<'g> {
    let shape = v.shape();
    let w = g.constant(weights(shape.iter().product(), seed).reshape(&shape));
    v.mul(w).sum()
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[1, 3, 1], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| project(g, v[0].add(v[1]), 9));
    check(vec![a.clone(), b.clone()], |g, v| project(g, v[0].sub(v[1]), 9));
    check(vec![a.clone(), b.clone()], |g, v| project(g, v[0].mul(v[1]), 9));
    let pos = b.map(|x| x.abs() + 0.5);
    check(vec![a.clone(), pos], |g, v| project(g, v[0].div(v[1]), 9));
    check(vec![a.clone()], |g, v| project(g, v[0].scale(-2.5).offset(0.3), 3));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 5], &mut rng);
    let pos = a.map(|x| x.abs() + 0.1);
    check(vec![a.clone()], |g, v| project(g, v[0].leaky_relu(0.01), 1));
    check(vec![a.clone()], |g, v| project(g, v[0].sigmoid(), 1));
    check(vec![a.clone()], |g, v| project(g, v[0].tanh(), 1));
    check(vec![a.clone()], |g, v| project(g, v[0].exp(), 1));
    check(vec![a.clone()], |g, v| project(g, v[0].square(), 1));
    check(vec![pos.clone()], |g, v| project(g, v[0].ln_clamped(1e-7), 1));
    check(vec![pos.clone()], |g, v| project(g, v[0].sqrt(), 1));
    check(vec![pos.clone()], |g, v| project(g, v[0].powf(2.0), 1));
    check(vec![pos], |g, v| project(g, v[0].powf(0.7), 1));
}

#[test]
fn reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 4, 3], &mut rng);
    check(vec![a.clone()], |g, v| project(g, v[0].sum_axes(&[1]), 4));
    check(vec![a.clone()], |g, v| project(g, v[0].mean_axes(&[0, 2]), 4));
    check(vec![a.clone()], |g, v| project(g, v[0].softmax(1), 4));
    check(vec![a.clone()], |g, v| project(g, v[0].log_softmax(1), 4));
    check(vec![a], |_, v| v[0].mean());
}

#[test]
fn matmul_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    check(vec![a.clone(), b], |g, v| project(g, v[0].matmul(v[1]), 5));
    let c = random(&[3, 2], &mut rng);
    check(vec![a.clone(), c], |g, v| project(g, Var::concat(&[v[0], v[1]], 1), 5));
    check(vec![a.clone()], |g, v| project(g, v[0].narrow(1, 1, 2), 5));
    let t = random(&[2, 3, 4], &mut rng);
    check(vec![t], |g, v| project(g, v[0].permute(&[2, 0, 1]).reshape(&[4, 6]), 5));
}

#[test]
fn conv3d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 2, 3, 5, 4], &mut rng);
    let w = random(&[3, 2, 3, 3, 1], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
        project(g, v[0].conv3d(v[1], Some(v[2]), [1, 2, 1], [1, 1, 0]), 6)
    });
    check(vec![x, w], |g, v| project(g, v[0].conv3d(v[1], None, [2, 1, 2], [0, 1, 0]), 6));
}

#[test]
fn pooling_upsample_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 2, 3, 5, 4], &mut rng);
    check(vec![x.clone()], |g, v| project(g, v[0].adaptive_max_pool3d([2, 2, 3]), 7));
    check(vec![x.clone()], |g, v| project(g, v[0].upsample_nearest([1, 2, 2]), 7));
    check(vec![x], |g, v| project(g, v[0].instance_norm(1e-5), 7));
}

#[test]
fn shared_leaf_accumulates() {
    check(vec![Tensor::new(&[2], vec![0.3, -0.7])], |_, v| v[0].mul(v[0]).add(v[0]).sum());
}

#[test]
fn constants_get_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::new(&[2], vec![1.0, 2.0]));
    let x = g.variable(Tensor::new(&[2], vec![3.0, 4.0]));
    let grads = g.backward(c.mul(x).sum());
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 1, 2, 4, 4], &mut rng);
    let w = random(&[1, 1, 1, 3, 3], &mut rng);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv3d(g.constant(w.clone()), None, [1, 1, 1], [0, 1, 1]).value();
    for z in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let mut want = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            want += w.data()[ky * 3 + kx] * x.data()[(z * 4 + iy as usize) * 4 + ix as usize];
                        }
                    }
                }
                let got = y.data()[(z * 4 + yy) * 4 + xx];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
