//! Image preprocessing: stain standardization, tissue masking, patching, quality filters,
//! perceptual hashing, colour jitter and dual-scale tensor construction.

pub mod color;
pub mod hash;
pub mod image;
pub mod mask;
pub mod pipeline;
pub mod quality;
pub mod records;
pub mod resize;
pub mod stain;

pub use color::{apply_jitter, color_jitter, JitterConfig, JitterFactors};
pub use hash::{dedup_keep_flags, dhash64, hamming};
pub use image::ImageU8;
pub use mask::{extract_patches, histogram, otsu_threshold, tissue_mask, PatchSource, TissueMask};
pub use pipeline::{preprocess, PreprocessConfig, RawImage, StainTarget};
pub use quality::laplacian_focus;
pub use records::{read_manifest, write_manifest, PatchRecord, MANIFEST_FILE, PATCH_DIR};
pub use resize::{
    make_dual_scale, resize_bilinear, to_standardized_tensor, DualScaleTensors, COARSE_SIZE,
    FINE_SIZE,
};
pub use stain::{
    estimate_stain_profile_macenko, macenko_normalize, reinhard_normalize, rgb_to_od, LabStats,
    StainMethod, StainProfile,
};
