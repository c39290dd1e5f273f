//! Preprocessing pipeline: stain standardization, tiling, blur and pen-mark rejection, and
//! per-site duplicate removal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hash::{dedup_keep_flags, DEFAULT_DEDUP_HAMMING};
use super::image::ImageU8;
use super::mask::{extract_patches, PatchSource};
use super::quality::{ink_stats, pen_mark_flags};
use super::records::PatchRecord;
use super::stain::{
    default_reference_image, estimate_profile_from_image, macenko_normalize, reinhard_normalize,
    LabStats, StainMethod, StainProfile,
};
use crate::error::Result;
use crate::labels::{Grade, Magnification};

/// Default blur rejection threshold on the Laplacian variance (0–255 grayscale).
pub const DEFAULT_BLUR_THRESHOLD: f64 = 15.0;
pub const DEFAULT_MIN_TISSUE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub min_tissue: f64,
    pub blur_threshold: f64,
    pub dedup_hamming: u32,
    pub stain: StainMethod,
    pub pen_filter: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            patch_size: 320,
            stride: 320,
            min_tissue: DEFAULT_MIN_TISSUE,
            blur_threshold: DEFAULT_BLUR_THRESHOLD,
            dedup_hamming: DEFAULT_DEDUP_HAMMING,
            stain: StainMethod::Macenko,
            pen_filter: true,
        }
    }
}

/// An input image with its labels.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub source_id: String,
    pub magnification: Magnification,
    pub label: Grade,
    pub image: ImageU8,
}

/// Reference appearance images are normalized to.
#[derive(Debug, Clone, PartialEq)]
pub struct StainTarget {
    pub profile: StainProfile,
    pub lab: LabStats,
}

impl StainTarget {
    pub fn from_reference(img: &ImageU8) -> Result<Self> {
        Ok(StainTarget {
            profile: estimate_profile_from_image(img)?,
            lab: LabStats::of_image(img),
        })
    }

    /// Built from the deterministic default reference tile.
    pub fn standard() -> Self {
        StainTarget::from_reference(&default_reference_image())
            .expect("default reference tile is estimable")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StainOutcome {
    Macenko,
    ReinhardFallback,
    Reinhard,
    Unchanged,
}

/// Applies the configured standardization, degrading Macenko → Reinhard → unchanged.
pub fn standardize_stain(
    img: &ImageU8,
    method: StainMethod,
    target: &StainTarget,
) -> (ImageU8, StainOutcome) {
    let reinhard = |outcome| match reinhard_normalize(img, &target.lab) {
        Ok(out) => (out, outcome),
        Err(_) => (img.clone(), StainOutcome::Unchanged),
    };
    match method {
        StainMethod::None => (img.clone(), StainOutcome::Unchanged),
        StainMethod::Reinhard => reinhard(StainOutcome::Reinhard),
        StainMethod::Macenko => match estimate_profile_from_image(img)
            .and_then(|src| macenko_normalize(img, &src, &target.profile))
        {
            Ok(out) => (out, StainOutcome::Macenko),
            Err(_) => reinhard(StainOutcome::ReinhardFallback),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub images: usize,
    pub stain_fallbacks: usize,
    pub stain_unchanged: usize,
    pub patches_with_tissue: usize,
    pub rejected_blur: usize,
    pub rejected_pen: usize,
    pub rejected_duplicate: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct PreprocessOutcome {
    pub patches: Vec<(PatchRecord, ImageU8)>,
    pub stats: PreprocessStats,
}

struct ImageResult {
    outcome: StainOutcome,
    candidates: Vec<(PatchRecord, ImageU8)>,
    blurred: usize,
    pen: usize,
}

fn process_one(
    raw: &RawImage,
    cfg: &PreprocessConfig,
    target: &StainTarget,
) -> Result<ImageResult> {
    let (img, outcome) = standardize_stain(&raw.image, cfg.stain, target);
    let source = PatchSource {
        source_id: raw.source_id.clone(),
        magnification: raw.magnification,
        label: raw.label,
    };
    let tiles = extract_patches(&img, &source, cfg.patch_size, cfg.stride, cfg.min_tissue)?;
    let with_tissue = tiles.len();
    let sharp: Vec<_> = tiles
        .into_iter()
        .filter(|(r, _)| r.focus_score >= cfg.blur_threshold)
        .collect();
    let blurred = with_tissue - sharp.len();
    let flags = if cfg.pen_filter {
        let stats: Vec<_> = sharp.iter().map(|(_, p)| ink_stats(p)).collect();
        pen_mark_flags(&stats)
    } else {
        vec![false; sharp.len()]
    };
    let pen = flags.iter().filter(|&&f| f).count();
    let candidates = sharp
        .into_iter()
        .zip(flags)
        .filter(|(_, f)| !f)
        .map(|(p, _)| p)
        .collect();
    Ok(ImageResult {
        outcome,
        candidates,
        blurred,
        pen,
    })
}

/// Runs the whole pipeline over one site's images.
///
/// Images are processed in parallel; duplicate removal then walks sources in lexical
/// `source_id` order and patches in grid row-major order, keeping first occurrences.
pub fn preprocess(
    mut images: Vec<RawImage>,
    cfg: &PreprocessConfig,
    target: &StainTarget,
) -> Result<PreprocessOutcome> {
    images.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let results: Vec<ImageResult> = images
        .par_iter()
        .map(|raw| process_one(raw, cfg, target))
        .collect::<Result<_>>()?;

    let mut stats = PreprocessStats {
        images: images.len(),
        ..Default::default()
    };
    let mut candidates = Vec::new();
    for r in results {
        match r.outcome {
            StainOutcome::ReinhardFallback => stats.stain_fallbacks += 1,
            StainOutcome::Unchanged if cfg.stain != StainMethod::None => stats.stain_unchanged += 1,
            _ => {}
        }
        stats.patches_with_tissue += r.candidates.len() + r.blurred + r.pen;
        stats.rejected_blur += r.blurred;
        stats.rejected_pen += r.pen;
        candidates.extend(r.candidates);
    }
    let hashes: Vec<u64> = candidates.iter().map(|(r, _)| r.dhash).collect();
    let keep = dedup_keep_flags(&hashes, cfg.dedup_hamming);
    let patches: Vec<_> = candidates
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p)
        .collect();
    stats.rejected_duplicate = hashes.len() - patches.len();
    stats.kept = patches.len();
    Ok(PreprocessOutcome { patches, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(seed: usize) -> ImageU8 {
        ImageU8::from_fn(64, 64, |x, y| {
            let v = ((x * (7 + seed) + y * 13 + (x * y) % (11 + seed)) % 97) as u8;
            if x < 8 {
                [250, 250, 250]
            } else {
                [120 + v, 40 + v, 140 + v / 2]
            }
        })
    }

    fn raw(id: &str, img: ImageU8) -> RawImage {
        RawImage {
            source_id: id.into(),
            magnification: Magnification::X20,
            label: Grade::GradeIII,
            image: img,
        }
    }

    #[test]
    fn duplicate_images_are_dropped_keeping_first() {
        let cfg = PreprocessConfig {
            patch_size: 64,
            stride: 64,
            stain: StainMethod::None,
            ..Default::default()
        };
        let images = vec![
            raw("b", textured(1)),
            raw("a", textured(1)),
            raw("c", textured(5)),
        ];
        let out = preprocess(images, &cfg, &StainTarget::standard()).unwrap();
        let ids: Vec<_> = out
            .patches
            .iter()
            .map(|(r, _)| r.source_id.as_str())
            .collect();
        assert_eq!(ids[0], "a");
        assert!(!ids.contains(&"b"));
        assert_eq!(out.stats.rejected_duplicate, 1);
    }

    #[test]
    fn blank_image_yields_no_patches() {
        let cfg = PreprocessConfig {
            patch_size: 32,
            stride: 32,
            ..Default::default()
        };
        let out = preprocess(
            vec![raw("w", ImageU8::filled(64, 64, [255; 3]))],
            &cfg,
            &StainTarget::standard(),
        )
        .unwrap();
        assert!(out.patches.is_empty());
    }

    #[test]
    fn blurry_patch_rejected() {
        let cfg = PreprocessConfig {
            patch_size: 64,
            stride: 64,
            stain: StainMethod::None,
            blur_threshold: 1e9,
            ..Default::default()
        };
        let out = preprocess(vec![raw("x", textured(2))], &cfg, &StainTarget::standard()).unwrap();
        assert!(out.patches.is_empty());
        assert_eq!(out.stats.rejected_blur, 1);
    }
}
