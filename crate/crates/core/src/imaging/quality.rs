//! Artifact screening: Laplacian focus measure and the pen-mark heuristic.

use super::color::rgb_to_hsv;
use super::image::ImageU8;
use super::stain::percentile_sorted;

/// Variance of the 3×3 Laplacian `[[0,1,0],[1,−4,1],[0,1,0]]` of the grayscale patch over
/// interior pixels. Returns 0 for patches smaller than 3×3.
pub fn laplacian_focus(img: &ImageU8) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let g = img.grayscale();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let lap = (g[i - w] + g[i + w] + g[i - 1] + g[i + 1] - 4.0 * g[i]) as f64;
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let n = ((w - 2) * (h - 2)) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Colour summary used by the pen-mark rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InkStats {
    /// Mean HSV saturation in [0, 1].
    pub saturation: f64,
    /// Saturation-weighted circular mean hue in degrees, `None` for achromatic patches.
    pub hue_deg: Option<f64>,
    /// Mean HSV value in [0, 1].
    pub value: f64,
}

pub fn ink_stats(img: &ImageU8) -> InkStats {
    let n = img.pixel_count() as f64;
    let (mut s_sum, mut v_sum, mut hx, mut hy) = (0.0, 0.0, 0.0, 0.0);
    for p in img.pixels() {
        let [h, s, v] = rgb_to_hsv([p[0] as f32, p[1] as f32, p[2] as f32]);
        s_sum += s as f64;
        v_sum += v as f64 / 255.0;
        let ang = (h as f64 * 360.0).to_radians();
        hx += s as f64 * ang.cos();
        hy += s as f64 * ang.sin();
    }
    let hue_deg = if hx.hypot(hy) / n < 1e-6 {
        None
    } else {
        Some(hy.atan2(hx).to_degrees().rem_euclid(360.0))
    };
    InkStats {
        saturation: s_sum / n,
        hue_deg,
        value: v_sum / n,
    }
}

/// Blue/green ink hues, or very dark (black ink) patches.
fn in_ink_band(stats: &InkStats) -> bool {
    let hue_ink = stats.hue_deg.is_some_and(|h| (90.0..270.0).contains(&h));
    hue_ink || stats.value < 0.25
}

/// Pen-mark approximation: a patch is flagged when its mean saturation exceeds the 0.85
/// quantile of the slide's patch saturations and its colour falls in an ink band.
pub fn pen_mark_flags(stats: &[InkStats]) -> Vec<bool> {
    if stats.is_empty() {
        return Vec::new();
    }
    let mut sats: Vec<f64> = stats.iter().map(|s| s.saturation).collect();
    sats.sort_by(|a, b| a.total_cmp(b));
    let q85 = percentile_sorted(&sats, 85.0);
    stats
        .iter()
        .map(|s| s.saturation > q85 && in_ink_band(s))
        .collect()
}
