//! Finite-difference checks for every backward op. Each returns the worst relative error
//! over `n` random coordinates of every differentiated input.

use fedpath_core::imaging::{COARSE_SIZE, FINE_SIZE};
use fedpath_core::model::{build_model, ModelConfig};
use fedpath_core::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout, dropout_backward,
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax_xent, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{model_loss, Tensor64};
use super::{fd_max_rel_err, rel_err};

/// Scale floor for the relative error of single ops.
pub const OP_FLOOR: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ±eps never crosses a ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn dot(r: &Tensor, out: &Tensor) -> f64 {
    r.data()
        .iter()
        .zip(out.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn with(shape: &[usize], v: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

pub fn dense(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, w, b) = (
        rand_tensor(&[4, 7], &mut rng),
        rand_tensor(&[7, 5], &mut rng),
        rand_tensor(&[5], &mut rng),
    );
    let r = rand_tensor(&[4, 5], &mut rng);
    let g = dense_backward(&x, &w, &r).unwrap();
    // Linear in every input, so a large step is exact and keeps f32 rounding negligible.
    let eps = 0.5;
    let ex = fd_max_rel_err(x.data(), g.grad_x.data(), n, eps, OP_FLOOR, &mut rng, |v| {
        dot(&r, &dense_forward(&with(x.shape(), v), &w, &b).unwrap())
    });
    let ew = fd_max_rel_err(w.data(), g.grad_w.data(), n, eps, OP_FLOOR, &mut rng, |v| {
        dot(&r, &dense_forward(&x, &with(w.shape(), v), &b).unwrap())
    });
    let eb = fd_max_rel_err(b.data(), g.grad_b.data(), n, eps, OP_FLOOR, &mut rng, |v| {
        dot(&r, &dense_forward(&x, &w, &with(b.shape(), v)).unwrap())
    });
    ex.max(ew).max(eb)
}

pub fn conv(n: usize, seed: u64, stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[2, 3, 9, 9], &mut rng);
    let k = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let out = conv2d_forward(&x, &k, &b, stride).unwrap();
    let r = rand_tensor(out.shape(), &mut rng);
    let g = conv2d_backward(&x, &k, &r, stride).unwrap();
    let eps = 0.5;
    let ex = fd_max_rel_err(
        x.data(),
        g.grad_x.as_ref().unwrap().data(),
        n,
        eps,
        OP_FLOOR,
        &mut rng,
        |v| {
            dot(
                &r,
                &conv2d_forward(&with(x.shape(), v), &k, &b, stride).unwrap(),
            )
        },
    );
    let ek = fd_max_rel_err(k.data(), g.grad_k.data(), n, eps, OP_FLOOR, &mut rng, |v| {
        dot(
            &r,
            &conv2d_forward(&x, &with(k.shape(), v), &b, stride).unwrap(),
        )
    });
    let eb = fd_max_rel_err(b.data(), g.grad_b.data(), n, eps, OP_FLOOR, &mut rng, |v| {
        dot(
            &r,
            &conv2d_forward(&x, &k, &with(b.shape(), v), stride).unwrap(),
        )
    });
    ex.max(ek).max(eb)
}

pub fn relu_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = off_kink(&[3, 16], &mut rng);
    let r = rand_tensor(&[3, 16], &mut rng);
    let g = relu_backward(&relu(&x), &r).unwrap();
    // Inputs stay at least 0.05 from the kink.
    fd_max_rel_err(x.data(), g.data(), n, 0.04, OP_FLOOR, &mut rng, |v| {
        dot(&r, &relu(&with(x.shape(), v)))
    })
}

pub fn gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
    let r = rand_tensor(&[2, 3], &mut rng);
    let g = global_avg_pool_backward(&r, x.shape()).unwrap();
    fd_max_rel_err(x.data(), g.data(), n, 0.5, OP_FLOOR, &mut rng, |v| {
        dot(&r, &global_avg_pool(&with(x.shape(), v)).unwrap())
    })
}

pub fn dropout_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[4, 8], &mut rng);
    let r = rand_tensor(&[4, 8], &mut rng);
    let p = 0.3;
    let mask_seed = rng.random::<u64>();
    let (_, mask) = dropout(&x, p, &mut ChaCha8Rng::seed_from_u64(mask_seed), true).unwrap();
    let g = dropout_backward(&r, &mask, p).unwrap();
    fd_max_rel_err(x.data(), g.data(), n, 0.5, OP_FLOOR, &mut rng, |v| {
        let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
        dot(
            &r,
            &dropout(&with(x.shape(), v), p, &mut m, true).unwrap().0,
        )
    })
}

pub fn softmax_xent_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[5, 3], |_| rng.random_range(-3.0..3.0));
    // Soft targets, as produced by MixUp.
    let mut t = Vec::new();
    for _ in 0..5 {
        let lam: f32 = rng.random();
        let (a, b) = (rng.random_range(0..3), rng.random_range(0..3));
        let mut row = [0.0f32; 3];
        row[a] += lam;
        row[b] += 1.0 - lam;
        t.extend(row);
    }
    let targets = Tensor::new(vec![5, 3], t).unwrap();
    let (_, g) = softmax_xent(&logits, &targets).unwrap();
    fd_max_rel_err(logits.data(), g.data(), n, 1e-3, OP_FLOOR, &mut rng, |v| {
        softmax_xent(&with(logits.shape(), v), &targets).unwrap().0
    })
}

/// Loss = softmax cross-entropy of the dual-stream model in training mode with a fixed
/// dropout mask. The analytic parameter gradient comes from the f32 backward pass; the
/// numeric one from central differences of the independent f64 forward pass.
pub fn full_model(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_model(&ModelConfig::default(), seed).unwrap();
    let x224 = rand_tensor(&[2, 3, FINE_SIZE, FINE_SIZE], &mut rng);
    let x320 = rand_tensor(&[2, 3, COARSE_SIZE, COARSE_SIZE], &mut rng);
    let targets = [[1.0, 0.0, 0.0], [0.0, 0.3, 0.7]];
    let y = Tensor::new(
        vec![2, 3],
        targets.iter().flatten().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let drop_seed = rng.random::<u64>();
    let (logits, cache) = model
        .forward_tensors(
            &x224,
            &x320,
            true,
            &mut ChaCha8Rng::seed_from_u64(drop_seed),
        )
        .unwrap();
    let (loss32, gl) = softmax_xent(&logits, &y).unwrap();
    let grads = model.backward(&cache, &gl).unwrap();
    let analytic: Vec<f32> = grads.values().copied().collect();

    // The model draws its dropout mask from the rng it is given, and nothing else.
    let p = model.config().dropout;
    let hidden = model.config().hidden;
    let (_, mask) = dropout(
        &Tensor::zeros(&[2, hidden]),
        p,
        &mut ChaCha8Rng::seed_from_u64(drop_seed),
        true,
    )
    .unwrap();
    let to64 = |t: &Tensor| Tensor64 {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| v as f64).collect(),
    };
    let (r224, r320) = (to64(&x224), to64(&x320));
    let mut params = model.params().clone();
    let loss64 = model_loss(&params, &r224, &r320, mask.data(), p as f64, &targets);
    assert!(
        (loss64 - loss32).abs() < 1e-5,
        "f64 reference loss {loss64} vs model {loss32}"
    );

    let w0: Vec<f32> = params.values().copied().collect();
    let mut worst = 0.0f64;
    for _ in 0..n {
        let i = rng.random_range(0..w0.len());
        // Step relative to the f32 spacing so the perturbed weight is exactly representable.
        let eps = 1e-4f32;
        let mut eval = |v: f32| {
            params.set_flat(i, v);
            model_loss(&params, &r224, &r320, mask.data(), p as f64, &targets)
        };
        let (hi, lo) = (w0[i] + eps, w0[i] - eps);
        let numeric = (eval(hi) - eval(lo)) / (hi as f64 - lo as f64);
        params.set_flat(i, w0[i]);
        worst = worst.max(rel_err(analytic[i] as f64, numeric, MODEL_FLOOR));
    }
    worst
}

/// Scale floor for the full model's relative error.
pub const MODEL_FLOOR: f64 = 1e-6;
