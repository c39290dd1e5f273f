//! Difference hashing for near-duplicate patch detection.

use super::image::ImageU8;
use super::resize::resize_plane_bilinear;

/// Default near-duplicate bound on the Hamming distance between two hashes.
pub const DEFAULT_DEDUP_HAMMING: u32 = 8;

/// 64-bit dHash: grayscale resized to 9×8, bit `y·8 + x` set iff `g[x+1, y] > g[x, y]`.
pub fn dhash64(img: &ImageU8) -> u64 {
    let small = resize_plane_bilinear(&img.grayscale(), img.width(), img.height(), 9, 8);
    let mut code = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            if small[y * 9 + x + 1] > small[y * 9 + x] {
                code |= 1 << (y * 8 + x);
            }
        }
    }
    code
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Keep-flags for a sequence of hashes: an entry is dropped when it lies within
/// `max_distance` of an earlier kept entry.
pub fn dedup_keep_flags(hashes: &[u64], max_distance: u32) -> Vec<bool> {
    let mut kept: Vec<u64> = Vec::new();
    hashes
        .iter()
        .map(|&h| {
            if kept.iter().any(|&k| hamming(h, k) <= max_distance) {
                false
            } else {
                kept.push(h);
                true
            }
        })
        .collect()
}
