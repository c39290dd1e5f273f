//! Otsu tissue masking and grid patch extraction.

use super::hash::dhash64;
use super::image::ImageU8;
use super::quality::laplacian_focus;
use super::records::PatchRecord;
use crate::error::{Error, Result};
use crate::labels::{Grade, Magnification};

/// 256-bin intensity histogram.
pub type Histogram = [u64; 256];

pub fn histogram(gray: &[u8]) -> Histogram {
    let mut h = [0u64; 256];
    for &g in gray {
        h[g as usize] += 1;
    }
    h
}

/// Little-endian 64-bit limbs.
type Wide = [u64; 5];

fn mul_wide(a: &[u64], b: u64) -> Wide {
    let mut out = [0u64; 5];
    let mut carry = 0u128;
    for (i, &limb) in a.iter().enumerate() {
        let prod = limb as u128 * b as u128 + out[i] as u128 + carry;
        out[i] = prod as u64;
        carry = prod >> 64;
    }
    out[a.len()] = carry as u64;
    out
}

fn cmp_wide(a: &Wide, b: &Wide) -> std::cmp::Ordering {
    a.iter().rev().cmp(b.iter().rev())
}

/// `d² · m` as a wide integer.
fn square_times(d: u128, m: u64) -> Wide {
    let limbs = [d as u64, (d >> 64) as u64];
    let mut sq = [0u64; 5];
    for (shift, &l) in limbs.iter().enumerate() {
        let part = mul_wide(&limbs, l);
        let mut carry = 0u128;
        for i in 0..(5 - shift) {
            let s = sq[i + shift] as u128 + part[i] as u128 + carry;
            sq[i + shift] = s as u64;
            carry = s >> 64;
        }
    }
    // d < 2^80 for any realistic histogram, so d² fits in three limbs.
    debug_assert_eq!(sq[3] | sq[4], 0);
    mul_wide(&sq[..4], m)
}

/// Otsu threshold `t`: class 0 is intensities `< t`, class 1 is `>= t`.
///
/// Maximizes the between-class variance `ω0·ω1·(μ0 − μ1)²`, compared exactly in integer
/// arithmetic; ties resolve to the smallest `t`.
pub fn otsu_threshold(hist: &Histogram) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as u128 * c as u128)
        .sum();
    // N²·σ_b² = (N·s0 − n0·S)² / (n0·n1). Compare a/b vs c/d as a·d vs c·b.
    let mut best: Option<(u8, u128, u64)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 1..256usize {
        n0 += hist[t - 1] as u128;
        s0 += (t as u128 - 1) * hist[t - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (total * s0).abs_diff(n0 * total_sum);
        let denom = u64::try_from(n0 * n1).expect("histogram too large for exact Otsu");
        let better = match best {
            None => true,
            Some((_, bd, bden)) => {
                cmp_wide(&square_times(d, bden), &square_times(bd, denom))
                    == std::cmp::Ordering::Greater
            }
        };
        if better {
            best = Some((t as u8, d, denom));
        }
    }
    best.map(|(t, _, _)| t).ok_or(Error::DegenerateHistogram)
}

/// Binary tissue mask (darker than the Otsu threshold) and its tissue fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub threshold: Option<u8>,
    pub tissue_fraction: f64,
}

impl TissueMask {
    /// Fraction of tissue pixels inside a window.
    pub fn window_fraction(&self, x0: usize, y0: usize, w: usize, h: usize) -> f64 {
        let mut count = 0usize;
        for y in y0..y0 + h {
            count += self.mask[y * self.width + x0..y * self.width + x0 + w]
                .iter()
                .filter(|&&m| m)
                .count();
        }
        count as f64 / (w * h) as f64
    }
}

pub fn tissue_mask(img: &ImageU8) -> TissueMask {
    let gray = img.grayscale_u8();
    let (mask, threshold) = match otsu_threshold(&histogram(&gray)) {
        Ok(t) => (gray.iter().map(|&g| g < t).collect::<Vec<_>>(), Some(t)),
        Err(_) => (vec![false; gray.len()], None),
    };
    let tissue = mask.iter().filter(|&&m| m).count();
    TissueMask {
        width: img.width(),
        height: img.height(),
        tissue_fraction: tissue as f64 / mask.len() as f64,
        mask,
        threshold,
    }
}

/// Identity of the image patches are cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    pub source_id: String,
    pub magnification: Magnification,
    pub label: Grade,
}

/// Tiles `img` on a regular grid in row-major order, keeping patches whose tissue fraction
/// (measured against the whole-image Otsu mask) is at least `min_tissue`.
pub fn extract_patches(
    img: &ImageU8,
    source: &PatchSource,
    patch_size: usize,
    stride: usize,
    min_tissue: f64,
) -> Result<Vec<(PatchRecord, ImageU8)>> {
    if stride == 0 || patch_size == 0 {
        return Err(Error::InvalidArgument(
            "patch size and stride must be >= 1".into(),
        ));
    }
    if patch_size > img.width() || patch_size > img.height() {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_size} larger than image {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mask = tissue_mask(img);
    let cols = (img.width() - patch_size) / stride + 1;
    let rows = (img.height() - patch_size) / stride + 1;
    let mut out = Vec::new();
    for gy in 0..rows {
        for gx in 0..cols {
            let (x0, y0) = (gx * stride, gy * stride);
            let fraction = mask.window_fraction(x0, y0, patch_size, patch_size);
            if fraction < min_tissue {
                continue;
            }
            let patch = img.crop(x0, y0, patch_size, patch_size)?;
            let record = PatchRecord {
                source_id: source.source_id.clone(),
                grid_x: gx,
                grid_y: gy,
                magnification: source.magnification,
                tissue_fraction: fraction,
                focus_score: laplacian_focus(&patch),
                dhash: dhash64(&patch),
                label: source.label,
            };
            out.push((record, patch));
        }
    }
    Ok(out)
}
