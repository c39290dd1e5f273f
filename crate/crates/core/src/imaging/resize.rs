//! Bilinear resampling (half-pixel centres, `align_corners = false`) and the dual-scale
//! tensor builder.

use super::image::ImageU8;
use crate::error::Result;
use crate::nn::Tensor;

/// Side of the fine-stream input.
pub const FINE_SIZE: usize = 224;
/// Side of the coarse-stream input.
pub const COARSE_SIZE: usize = 320;

/// Per-channel standardization constants applied after scaling to [0, 1].
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resize of a single-channel plane.
pub fn resize_plane_bilinear(
    plane: &[f32],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    resize_interleaved(plane, 1, width, height, out_w, out_h)
}

fn resize_interleaved(
    src: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let xs = taps(width, out_w);
    let ys = taps(height, out_h);
    let mut out = Vec::with_capacity(out_w * out_h * channels);
    for ty in &ys {
        let row0 = &src[ty.lo * width * channels..(ty.lo + 1) * width * channels];
        let row1 = &src[ty.hi * width * channels..(ty.hi + 1) * width * channels];
        for tx in &xs {
            for c in 0..channels {
                let a = row0[tx.lo * channels + c];
                let b = row0[tx.hi * channels + c];
                let top = a + (b - a) * tx.frac;
                let a = row1[tx.lo * channels + c];
                let b = row1[tx.hi * channels + c];
                let bottom = a + (b - a) * tx.frac;
                out.push(top + (bottom - top) * ty.frac);
            }
        }
    }
    out
}

/// Bilinear RGB resize with rounding back to 8 bits.
pub fn resize_bilinear(img: &ImageU8, out_w: usize, out_h: usize) -> Result<ImageU8> {
    if out_w == img.width() && out_h == img.height() {
        return Ok(img.clone());
    }
    let src: Vec<f32> = img.data().iter().map(|&v| v as f32).collect();
    let data = resize_interleaved(
        &src,
        3,
        img.width(),
        img.height(),
        out_w.max(1),
        out_h.max(1),
    )
    .into_iter()
    .map(|v| v.round().clamp(0.0, 255.0) as u8)
    .collect();
    ImageU8::new(out_w, out_h, data)
}

/// `[3, size, size]` standardized tensor of `img` resized to `size`.
pub fn to_standardized_tensor(img: &ImageU8, size: usize) -> Result<Tensor> {
    let resized = resize_bilinear(img, size, size)?;
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (p[c] as f32 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Paired fine (224²) and coarse (320²) inputs for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualScaleTensors {
    pub t224: Tensor,
    pub t320: Tensor,
}

pub fn make_dual_scale(patch: &ImageU8) -> Result<DualScaleTensors> {
    Ok(DualScaleTensors {
        t224: to_standardized_tensor(patch, FINE_SIZE)?,
        t320: to_standardized_tensor(patch, COARSE_SIZE)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = ImageU8::from_fn(13, 7, |x, y| [(x * 19) as u8, (y * 33) as u8, 7]);
        assert_eq!(resize_bilinear(&img, 13, 7).unwrap(), img);
        let plane: Vec<f32> = (0..91).map(|i| i as f32 * 0.5).collect();
        assert_eq!(resize_plane_bilinear(&plane, 13, 7, 13, 7), plane);
    }

    #[test]
    fn constant_stays_constant() {
        let img = ImageU8::filled(9, 5, [12, 200, 77]);
        for (w, h) in [(1, 1), (4, 17), (30, 30)] {
            let r = resize_bilinear(&img, w, h).unwrap();
            assert!(r.pixels().all(|p| p == [12, 200, 77]));
        }
    }

    #[test]
    fn two_by_two_upsample_matches_hand_evaluation() {
        // Source samples at centres 0 and 1; output centres map to -0.25, 0.25, 0.75, 1.25,
        // clamped to [0, 1], giving weights 0, 0.25, 0.75, 1 on the second sample.
        let plane = [0.0, 4.0, 8.0, 12.0];
        let out = resize_plane_bilinear(&plane, 2, 2, 4, 4);
        let w = [0.0f32, 0.25, 0.75, 1.0];
        for (oy, &wy) in w.iter().enumerate() {
            for (ox, &wx) in w.iter().enumerate() {
                let top = 0.0 + 4.0 * wx;
                let bottom = 8.0 + 4.0 * wx;
                let expect = top + (bottom - top) * wy;
                assert_eq!(out[oy * 4 + ox], expect);
            }
        }
    }

    #[test]
    fn dual_scale_shapes_and_standardization() {
        let img = ImageU8::filled(50, 50, [255, 0, 128]);
        let d = make_dual_scale(&img).unwrap();
        assert_eq!(d.t224.shape(), &[3, 224, 224]);
        assert_eq!(d.t320.shape(), &[3, 320, 320]);
        let r = d.t320.data()[0];
        assert!((r - (1.0 - 0.485) / 0.229).abs() < 1e-5);
        let g = d.t224.data()[224 * 224];
        assert!((g - (0.0 - 0.456) / 0.224).abs() < 1e-5);
    }
}
