//! Training-time augmentation: MixUp with Beta-distributed mixing weights and
//! class-balanced index sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::labels::{Grade, Magnification, NUM_GRADES};
use crate::nn::Tensor;

/// A mini-batch of dual-scale inputs with probability-row targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// `[B, 3, 224, 224]`
    pub x224: Tensor,
    /// `[B, 3, 320, 320]`
    pub x320: Tensor,
    /// `[B, 3]`, rows sum to one.
    pub y: Tensor,
    pub magnification: Vec<Magnification>,
}

impl LabeledBatch {
    pub fn new(
        x224: Tensor,
        x320: Tensor,
        y: Tensor,
        magnification: Vec<Magnification>,
    ) -> Result<Self> {
        let b = y.shape().first().copied().unwrap_or(0);
        if b == 0
            || y.shape() != [b, NUM_GRADES]
            || x224.rank() != 4
            || x320.rank() != 4
            || x224.dim(0) != b
            || x320.dim(0) != b
            || magnification.len() != b
        {
            return Err(Error::Shape(format!(
                "batch: x224 {:?}, x320 {:?}, y {:?}, {} tags",
                x224.shape(),
                x320.shape(),
                y.shape(),
                magnification.len()
            )));
        }
        for (i, row) in y.data().chunks_exact(NUM_GRADES).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "label row {i} is not a probability vector"
                )));
            }
        }
        Ok(LabeledBatch {
            x224,
            x320,
            y,
            magnification,
        })
    }

    pub fn len(&self) -> usize {
        self.y.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Gamma(shape, 1)` by Marsaglia–Tsang, returned as a natural log so that tiny shapes do
/// not underflow. Shapes below one use the boost `Gamma(a) = Gamma(a + 1)·U^(1/a)`.
fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        return log_gamma_sample(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.random::<f64>();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// `Gamma(shape, 1)` variate.
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    log_gamma_sample(shape, rng).exp()
}

/// Symmetric `Beta(alpha, alpha)` from two Gamma draws; always in `[0, 1]`.
pub fn beta_sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Beta alpha must be > 0, got {alpha}"
        )));
    }
    let lx = log_gamma_sample(alpha, rng);
    let ly = log_gamma_sample(alpha, rng);
    // x / (x + y) = 1 / (1 + e^(ly − lx))
    Ok((1.0 / (1.0 + (ly - lx).exp())).clamp(0.0, 1.0))
}

/// `Dirichlet(alpha, …, alpha)` over `k` categories, normalized in log space so that tiny
/// `alpha` cannot underflow every component to zero.
pub fn dirichlet_sample<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet needs alpha > 0 and k >= 1, got {alpha}, {k}"
        )));
    }
    let logs: Vec<f64> = (0..k).map(|_| log_gamma_sample(alpha, rng)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

fn mix_into(dst: &mut [f32], xi: &[f32], xj: &[f32], lambda: f32) {
    let rest = 1.0 - lambda;
    // Snap lambda so that lambda + rest == 1 exactly; one-hot label rows then sum to 1.
    let lambda = 1.0 - rest;
    for ((d, &a), &b) in dst.iter_mut().zip(xi).zip(xj) {
        *d = lambda * a + rest * b;
    }
}

/// MixUp with an explicit partner permutation and one weight per output sample:
/// `x̃_i = λ_i·x_i + (1 − λ_i)·x_perm[i]`, applied identically to both scales and the labels.
pub fn mixup_with(batch: &LabeledBatch, perm: &[usize], lambdas: &[f32]) -> Result<LabeledBatch> {
    let b = batch.len();
    if perm.len() != b || lambdas.len() != b || perm.iter().any(|&j| j >= b) {
        return Err(Error::InvalidArgument(
            "mixup permutation/weights length".into(),
        ));
    }
    let mut out = batch.clone();
    for (i, (&j, &lambda)) in perm.iter().zip(lambdas).enumerate() {
        if j == i {
            continue;
        }
        mix_into(
            out.x224.sample_mut(i),
            batch.x224.sample(i),
            batch.x224.sample(j),
            lambda,
        );
        mix_into(
            out.x320.sample_mut(i),
            batch.x320.sample(i),
            batch.x320.sample(j),
            lambda,
        );
        mix_into(
            out.y.sample_mut(i),
            batch.y.sample(i),
            batch.y.sample(j),
            lambda,
        );
    }
    Ok(out)
}

/// Standard MixUp: random partner permutation, `λ ~ Beta(alpha, alpha)` per pair.
/// Batches with fewer than two samples are returned unchanged.
pub fn mixup<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    alpha: f64,
    rng: &mut R,
) -> Result<LabeledBatch> {
    let b = batch.len();
    if b < 2 {
        return Ok(batch.clone());
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let lambdas = (0..b)
        .map(|_| beta_sample(alpha, rng).map(|l| l as f32))
        .collect::<Result<Vec<_>>>()?;
    mixup_with(batch, &perm, &lambdas)
}

fn class_members(labels: &[Grade]) -> [Vec<usize>; NUM_GRADES] {
    let mut members: [Vec<usize>; NUM_GRADES] = Default::default();
    for (i, g) in labels.iter().enumerate() {
        members[g.index()].push(i);
    }
    members
}

fn draw_balanced<R: Rng + ?Sized>(
    classes: &[&Vec<usize>],
    n_draws: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..n_draws)
        .map(|_| {
            let members = classes[rng.random_range(0..classes.len())];
            members[rng.random_range(0..members.len())]
        })
        .collect()
}

/// Sampling with replacement where each sample's weight is inversely proportional to its
/// class count, so every grade is drawn with probability 1/3. Every grade must be present.
pub fn class_balanced_indices<R: Rng + ?Sized>(
    labels: &[Grade],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let members = class_members(labels);
    if let Some(g) = Grade::ALL.iter().find(|g| members[g.index()].is_empty()) {
        return Err(Error::EmptyClass(g.to_string()));
    }
    let classes: Vec<&Vec<usize>> = members.iter().collect();
    Ok(draw_balanced(&classes, n_draws, rng))
}

/// Like [`class_balanced_indices`], but balances over the grades that are present only.
/// Used on non-IID client shards that may lack a grade entirely.
pub fn balanced_indices_present<R: Rng + ?Sized>(
    labels: &[Grade],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let members = class_members(labels);
    let classes: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample from an empty label set".into(),
        ));
    }
    Ok(draw_balanced(&classes, n_draws, rng))
}
