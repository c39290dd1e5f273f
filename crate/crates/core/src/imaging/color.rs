//! Colour jitter in brightness → contrast → saturation → hue order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageU8;

/// Jitter half-ranges. Brightness, contrast and saturation factors are drawn from
/// `[1 − r, 1 + r]`; the hue shift from `[−h, h]` turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }
}

/// Concrete factors for one application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_shift: f32,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
    };

    /// Always consumes four uniform draws so the stream position is independent of the ranges.
    pub fn sample<R: Rng + ?Sized>(cfg: &JitterConfig, rng: &mut R) -> Self {
        let mut draw = |r: f32| {
            let u: f32 = rng.random();
            (2.0 * u - 1.0) * r
        };
        JitterFactors {
            brightness: 1.0 + draw(cfg.brightness),
            contrast: 1.0 + draw(cfg.contrast),
            saturation: 1.0 + draw(cfg.saturation),
            hue_shift: draw(cfg.hue),
        }
    }
}

/// RGB on 0–255 → (hue in turns [0,1), saturation [0,1], value 0–255).
pub fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn clamp255(v: f32) -> f32 {
    v.clamp(0.0, 255.0)
}

/// Applies fixed factors. Each stage clamps to [0, 255]; neutral factors are skipped.
pub fn apply_jitter(img: &ImageU8, f: &JitterFactors) -> ImageU8 {
    let mut px: Vec<[f32; 3]> = img
        .pixels()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    if f.brightness != 1.0 {
        for p in &mut px {
            *p = p.map(|v| clamp255(v * f.brightness));
        }
    }
    if f.contrast != 1.0 {
        let mean = (px
            .iter()
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) as f64)
            .sum::<f64>()
            / px.len() as f64) as f32;
        for p in &mut px {
            *p = p.map(|v| clamp255(mean + (v - mean) * f.contrast));
        }
    }
    if f.saturation != 1.0 {
        for p in &mut px {
            let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            *p = p.map(|v| clamp255(gray + (v - gray) * f.saturation));
        }
    }
    if f.hue_shift != 0.0 {
        for p in &mut px {
            let [h, s, v] = rgb_to_hsv(*p);
            *p = hsv_to_rgb([h + f.hue_shift, s, v]).map(clamp255);
        }
    }
    let data = px.iter().flat_map(|p| p.map(|v| v.round() as u8)).collect();
    ImageU8::new(img.width(), img.height(), data).expect("same dimensions")
}

pub fn color_jitter<R: Rng + ?Sized>(img: &ImageU8, rng: &mut R, cfg: &JitterConfig) -> ImageU8 {
    let f = JitterFactors::sample(cfg, rng);
    apply_jitter(img, &f)
}
