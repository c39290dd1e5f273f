//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use std::sync::Arc;

use fedpath_core::config::RunConfig;
use fedpath_core::datagen::{render_dataset, SynthSpec};
use fedpath_core::federation::{FederationConfig, Mode, Sample};
use fedpath_core::imaging::stain::default_reference_profile;
use fedpath_core::imaging::ImageU8;
use fedpath_core::Magnification;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the scale so near-zero gradients do not blow up.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `n` random coordinates of `x`; returns the worst relative
/// error against `analytic`.
pub fn fd_max_rel_err<R: Rng>(
    x: &[f32],
    analytic: &[f32],
    n: usize,
    eps: f32,
    floor: f64,
    rng: &mut R,
    mut f: impl FnMut(&[f32]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for _ in 0..n {
        let i = rng.random_range(0..x.len());
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let h = ((x[i] + eps) as f64) - ((x[i] - eps) as f64);
        let numeric = (up - down) / h;
        worst = worst.max(rel_err(analytic[i] as f64, numeric, floor));
    }
    worst
}

/// Weighted mean in f64, summed in the order given.
pub fn weighted_mean_oracle(values: &[Vec<f32>], weights: &[usize]) -> Vec<f64> {
    let n: f64 = weights.iter().map(|&w| w as f64).sum();
    (0..values[0].len())
        .map(|j| {
            values
                .iter()
                .zip(weights)
                .map(|(v, &w)| w as f64 / n * v[j] as f64)
                .sum()
        })
        .collect()
}

/// Distance in units in the last place between two finite f32 values.
pub fn ulp_distance(a: f32, b: f32) -> u32 {
    let key = |v: f32| {
        let bits = v.to_bits() as i32;
        if bits < 0 {
            i32::MIN - bits
        } else {
            bits
        }
    };
    (key(a) as i64 - key(b) as i64).unsigned_abs() as u32
}

/// Exhaustive Otsu over all thresholds `t` in 1..=255 (class 0 is `< t`), comparing the
/// between-class variance `(s0·n1 − s1·n0)² / (n0·n1)` exactly with big integers; the
/// first maximum wins.
pub fn otsu_exhaustive(hist: &[u64; 256]) -> Option<u8> {
    let mut best: Option<(u8, BigUint, BigUint)> = None;
    for t in 1..256usize {
        let n0: u64 = hist[..t].iter().sum();
        let n1: u64 = hist[t..].iter().sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: BigUint = hist[..t]
            .iter()
            .enumerate()
            .map(|(v, &c)| BigUint::from(v as u64) * c)
            .sum();
        let s1: BigUint = hist[t..]
            .iter()
            .enumerate()
            .map(|(v, &c)| BigUint::from((v + t) as u64) * c)
            .sum();
        let a = &s0 * n1;
        let b = &s1 * n0;
        let diff = if a > b { a - b } else { b - a };
        let num = &diff * &diff;
        let den = BigUint::from(n0) * n1;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Inverse of the optical-density transform used by the stain code.
pub fn od_to_rgb(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Unit vector at angles `(theta, phi)` in degrees.
pub fn unit(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

/// `p`-th percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Small synthetic samples straight from the generator (no preprocessing).
pub fn synth_samples(n_per_class: usize, image_size: usize, seed: u64) -> Vec<Sample> {
    let spec = SynthSpec {
        n_per_class,
        base_size: (2 * image_size).max(64),
        image_size,
        seed,
        ..Default::default()
    };
    render_dataset(&spec)
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            record: s.record,
            image: Arc::new(s.image),
        })
        .collect()
}

/// Per-channel max absolute difference.
pub fn max_abs_diff(a: &ImageU8, b: &ImageU8) -> u8 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.abs_diff(y))
        .max()
        .unwrap_or(0)
}

/// Two-stain image from known unit vectors. A third of the pixels carry hematoxylin only,
/// a third eosin only, the rest a mixture. Returns the image and the true concentrations.
pub fn two_stain_image(h: [f64; 3], e: [f64; 3], seed: u64) -> (ImageU8, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ch, mut ce) = (Vec::new(), Vec::new());
    let img = ImageU8::from_fn(96, 96, |_, _| {
        let (a, b) = match rng.random_range(0..3) {
            0 => (rng.random_range(0.3..1.5), 0.0),
            1 => (0.0, rng.random_range(0.3..1.2)),
            _ => (rng.random_range(0.2..1.2), rng.random_range(0.2..0.9)),
        };
        ch.push(a);
        ce.push(b);
        [0, 1, 2].map(|k| od_to_rgb(a * h[k] + b * e[k]))
    });
    (img, ch, ce)
}

pub fn random_profile(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    // Perturb the usual H&E directions by up to ~8 degrees each.
    let base = default_reference_profile().stain_matrix;
    let jitter = |v: [f64; 3], rng: &mut ChaCha8Rng| {
        let w = v.map(|c| c + rng.random_range(-0.1..0.1));
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        w.map(|c| c / n)
    };
    (jitter(base[0], rng), jitter(base[1], rng))
}

/// Random 256-bin histogram: dense noise, a few spikes (many ties) or two lumps.
pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.random_range(0..3) {
        // Dense noise.
        0 => h.iter_mut().for_each(|c| *c = rng.random_range(0..1000)),
        // A few spikes, which produce many exact ties.
        1 => {
            for _ in 0..rng.random_range(2..6) {
                h[rng.random_range(0..256)] += rng.random_range(1..50);
            }
        }
        // Two lumps, like tissue on background.
        _ => {
            for _ in 0..rng.random_range(200..5000) {
                let centre = if rng.random::<bool>() { 200.0 } else { 90.0 };
                let v = centre + 25.0 * (rng.random::<f64>() - 0.5) * 4.0;
                h[v.clamp(0.0, 255.0) as usize] += 1;
            }
        }
    }
    h
}

/// Five specimens per grade at two magnifications, 64 px.
pub fn small_dataset(seed: u64) -> Vec<Sample> {
    let spec = SynthSpec {
        n_per_class: 5,
        class_weights: [1.0; 3],
        base_size: 128,
        image_size: 64,
        magnifications: vec![Magnification::X4, Magnification::X40],
        seed,
        ..Default::default()
    };
    render_dataset(&spec)
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            record: s.record,
            image: Arc::new(s.image),
        })
        .collect()
}

pub fn small_config(mode: Mode, n_clients: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_fraction = 0.6;
    cfg.data.val_fraction = 0.2;
    cfg.federation = FederationConfig {
        n_clients,
        rounds,
        local_epochs: 1,
        batch_size: 4,
        lr: 1e-3,
        mode,
        ..Default::default()
    };
    cfg
}
