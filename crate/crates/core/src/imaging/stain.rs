//! Stain standardization: optical density, Macenko stain-vector estimation and
//! normalization, and Reinhard lαβ statistics matching.

use serde::{Deserialize, Serialize};

use super::image::ImageU8;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Default transmitted light intensity.
pub const DEFAULT_I0: f32 = 255.0;

const POWER_ITERATIONS: usize = 200;
const POWER_TOL: f64 = 1e-9;
const MIN_TISSUE_PIXELS: usize = 100;
/// Stain vectors closer than this are treated as a single stain.
const MIN_STAIN_SEPARATION_DEG: f64 = 3.0;

/// Hematoxylin (row 0) and eosin (row 1) unit vectors in OD space plus their
/// 99th-percentile concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    pub stain_matrix: [[f64; 3]; 2],
    pub max_conc: [f64; 2],
}

impl StainProfile {
    pub fn new(h: [f64; 3], e: [f64; 3], max_conc: [f64; 2]) -> Result<Self> {
        if max_conc.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::StainEstimation(format!(
                "max concentrations must be positive, got {max_conc:?}"
            )));
        }
        Ok(StainProfile {
            stain_matrix: [normalize(h)?, normalize(e)?],
            max_conc,
        })
    }

    /// Least-squares concentrations `(c_h, c_e)` of one OD pixel.
    fn unmixer(&self) -> Result<Unmixer> {
        Unmixer::new(&self.stain_matrix)
    }
}

/// Mean and standard deviation of each lαβ channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(&v, &v).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::StainEstimation("zero-length stain vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

fn od_of(p: u8, i0: f32) -> f32 {
    (-((p as f32 + 1.0) / i0).log10()).max(0.0)
}

/// Optical density `−log10((p + 1)/i0)` clamped at zero, as an `[H, W, 3]` tensor.
pub fn rgb_to_od(img: &ImageU8, i0: f32) -> Result<Tensor> {
    if !(i0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "i0 must be positive, got {i0}"
        )));
    }
    let data = img.data().iter().map(|&p| od_of(p, i0)).collect();
    Tensor::new(vec![img.height(), img.width(), 3], data)
}

/// OD pixels as triples, convenient for the estimator.
pub fn od_pixels(img: &ImageU8, i0: f32) -> Vec<[f32; 3]> {
    img.pixels()
        .map(|p| [od_of(p[0], i0), od_of(p[1], i0), od_of(p[2], i0)])
        .collect()
}

fn od_to_u8(od: f64, i0: f64) -> u8 {
    (i0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Linear-interpolated percentile (`q` in 0..=100) of a sorted slice.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(values, q)
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Dominant eigenpair of a symmetric 3×3 matrix by power iteration.
fn power_iteration(m: &[[f64; 3]; 3], start: [f64; 3]) -> ([f64; 3], f64) {
    let mut v = normalize(start).unwrap_or([1.0, 0.0, 0.0]);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = mat_vec(m, &v);
        let n = dot(&w, &w).sqrt();
        if n < 1e-300 {
            return (v, 0.0);
        }
        let next = [w[0] / n, w[1] / n, w[2] / n];
        let delta = (0..3).map(|i| (next[i] - v[i]).abs()).fold(0.0, f64::max);
        v = next;
        lambda = dot(&v, &mat_vec(m, &v));
        if delta < POWER_TOL {
            break;
        }
    }
    (v, lambda)
}

/// Two leading eigenpairs via power iteration with deflation.
fn top_two_eigen(cov: &[[f64; 3]; 3]) -> [([f64; 3], f64); 2] {
    let (v1, l1) = power_iteration(cov, [1.0, 1.0, 1.0]);
    let mut deflated = *cov;
    for (i, row) in deflated.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell -= l1 * v1[i] * v1[j];
        }
    }
    // Start orthogonal to v1 so the deflated iteration cannot re-find it.
    let seed = if v1[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let s = dot(&seed, &v1);
    let start = [
        seed[0] - s * v1[0],
        seed[1] - s * v1[1],
        seed[2] - s * v1[2],
    ];
    let (v2, l2) = power_iteration(&deflated, start);
    [(v1, l1), (v2, l2)]
}

struct Unmixer {
    /// Rows of `(S Sᵀ)⁻¹ S`, mapping an OD triple to two concentrations.
    pinv: [[f64; 3]; 2],
}

impl Unmixer {
    fn new(s: &[[f64; 3]; 2]) -> Result<Self> {
        let (a, b, d) = (dot(&s[0], &s[0]), dot(&s[0], &s[1]), dot(&s[1], &s[1]));
        let det = a * d - b * b;
        if !(det.abs() > 1e-10) {
            return Err(Error::StainEstimation(
                "stain matrix is singular; stain vectors are collinear".into(),
            ));
        }
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let mut pinv = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                pinv[r][c] = inv[r][0] * s[0][c] + inv[r][1] * s[1][c];
            }
        }
        Ok(Unmixer { pinv })
    }

    fn unmix(&self, od: &[f64; 3]) -> [f64; 2] {
        [dot(&self.pinv[0], od), dot(&self.pinv[1], od)]
    }
}

/// Macenko stain-vector estimation from OD pixels.
///
/// Pixels with any channel at or below `beta` are dropped before the eigen-analysis; the
/// concentration percentile uses every pixel.
pub fn estimate_stain_profile_macenko(
    od: &[[f32; 3]],
    beta: f64,
    alpha_pct: f64,
) -> Result<StainProfile> {
    let tissue: Vec<[f64; 3]> = od
        .iter()
        .filter(|p| p.iter().all(|&c| c as f64 > beta))
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::StainEstimation(format!(
            "{} pixels above OD threshold {beta}, need {MIN_TISSUE_PIXELS}",
            tissue.len()
        )));
    }
    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in &tissue {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in &tissue {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    let [(mut e1, l1), (mut e2, l2)] = top_two_eigen(&cov);
    if !(l1 > 0.0) || !(l2 > 1e-6 * l1) {
        return Err(Error::StainEstimation(
            "OD pixels span fewer than two stain directions".into(),
        ));
    }
    if e1.iter().sum::<f64>() < 0.0 {
        e1 = e1.map(|v| -v);
    }
    if e2.iter().sum::<f64>() < 0.0 {
        e2 = e2.map(|v| -v);
    }
    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| dot(p, &e2).atan2(dot(p, &e1)))
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&angles, alpha_pct);
    let hi = percentile_sorted(&angles, 100.0 - alpha_pct);
    let direction = |phi: f64| {
        let (s, c) = phi.sin_cos();
        [
            c * e1[0] + s * e2[0],
            c * e1[1] + s * e2[1],
            c * e1[2] + s * e2[2],
        ]
    };
    let (v_lo, v_hi) = (normalize(direction(lo))?, normalize(direction(hi))?);
    let (h, e) = if v_lo[0] > v_hi[0] {
        (v_lo, v_hi)
    } else {
        (v_hi, v_lo)
    };
    if angle_deg(h, e) < MIN_STAIN_SEPARATION_DEG {
        return Err(Error::StainEstimation(format!(
            "recovered stain vectors only {:.2} degrees apart",
            angle_deg(h, e)
        )));
    }
    let unmixer = Unmixer::new(&[h, e])?;
    let (mut ch, mut ce): (Vec<f64>, Vec<f64>) = od
        .iter()
        .map(|p| unmixer.unmix(&[p[0] as f64, p[1] as f64, p[2] as f64]))
        .map(|c| (c[0], c[1]))
        .unzip();
    let max_conc = [percentile(&mut ch, 99.0), percentile(&mut ce, 99.0)];
    StainProfile::new(h, e, max_conc)
}

/// Convenience wrapper: estimate from an image with the default parameters.
pub fn estimate_profile_from_image(img: &ImageU8) -> Result<StainProfile> {
    estimate_stain_profile_macenko(&od_pixels(img, DEFAULT_I0), 0.15, 1.0)
}

/// Maps `img` from the `source` stain appearance to the `target` one.
///
/// Concentrations are rescaled by `target.max_conc / source.max_conc` and recomposed with the
/// target stain vectors. The component of each pixel's OD outside the source stain plane is
/// carried over unchanged, so `target == source` reproduces the input.
pub fn macenko_normalize(
    img: &ImageU8,
    source: &StainProfile,
    target: &StainProfile,
) -> Result<ImageU8> {
    let unmixer = source.unmixer()?;
    let scale = [
        target.max_conc[0] / source.max_conc[0],
        target.max_conc[1] / source.max_conc[1],
    ];
    let (sh, se) = (source.stain_matrix[0], source.stain_matrix[1]);
    let (th, te) = (target.stain_matrix[0], target.stain_matrix[1]);
    let i0 = DEFAULT_I0 as f64;
    let mut out = Vec::with_capacity(img.data().len());
    for p in img.pixels() {
        let od = [
            od_of(p[0], DEFAULT_I0) as f64,
            od_of(p[1], DEFAULT_I0) as f64,
            od_of(p[2], DEFAULT_I0) as f64,
        ];
        let c = unmixer.unmix(&od);
        for k in 0..3 {
            let residual = od[k] - (c[0] * sh[k] + c[1] * se[k]);
            let mapped = c[0] * scale[0] * th[k] + c[1] * scale[1] * te[k] + residual;
            out.push(od_to_u8(mapped, i0));
        }
    }
    ImageU8::new(img.width(), img.height(), out)
}

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *cell = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn log_lms_to_lab(v: [f64; 3]) -> [f64; 3] {
    [
        (v[0] + v[1] + v[2]) / 3f64.sqrt(),
        (v[0] + v[1] - 2.0 * v[2]) / 6f64.sqrt(),
        (v[0] - v[1]) / 2f64.sqrt(),
    ]
}

fn lab_to_log_lms(v: [f64; 3]) -> [f64; 3] {
    let (l, a, b) = (v[0] / 3f64.sqrt(), v[1] / 6f64.sqrt(), v[2] / 2f64.sqrt());
    [l + a + b, l + a - b, l - 2.0 * a]
}

/// Ruderman lαβ of one pixel; RGB is mapped to `(p + 1)/256` so the logarithm is finite.
pub fn rgb_to_lab(p: [u8; 3]) -> [f64; 3] {
    let rgb = p.map(|v| (v as f64 + 1.0) / 256.0);
    let lms = mat_vec(&RGB_TO_LMS, &rgb);
    log_lms_to_lab(lms.map(|v| v.max(1e-12).log10()))
}

/// Inverse of [`rgb_to_lab`] before quantization, on the 0–255 scale.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let lms = lab_to_log_lms(lab).map(|v| 10f64.powf(v));
    mat_vec(&invert3(&RGB_TO_LMS), &lms).map(|v| v * 256.0 - 1.0)
}

fn stats_of(values: &[[f64; 3]]) -> LabStats {
    let n = values.len() as f64;
    let mut mean = [0.0; 3];
    for v in values {
        for c in 0..3 {
            mean[c] += v[c];
        }
    }
    mean = mean.map(|m| m / n);
    let mut var = [0.0; 3];
    for v in values {
        for c in 0..3 {
            var[c] += (v[c] - mean[c]).powi(2);
        }
    }
    LabStats {
        mean,
        std: var.map(|s| (s / n).sqrt()),
    }
}

pub fn lab_pixels(img: &ImageU8) -> Vec<[f64; 3]> {
    img.pixels().map(rgb_to_lab).collect()
}

impl LabStats {
    pub fn of_image(img: &ImageU8) -> LabStats {
        stats_of(&lab_pixels(img))
    }

    pub fn of_lab(values: &[[f64; 3]]) -> LabStats {
        stats_of(values)
    }
}

const FLAT_CHANNEL_STD: f64 = 1e-6;

/// Reinhard transfer in lαβ space, returned before conversion back to RGB.
///
/// A channel with no spread (e.g. α on a pure gray image) is set to the target mean.
pub fn reinhard_transfer_lab(img: &ImageU8, target: &LabStats) -> Result<Vec<[f64; 3]>> {
    let lab = lab_pixels(img);
    let src = stats_of(&lab);
    if src.std.iter().all(|&s| s < FLAT_CHANNEL_STD) {
        return Err(Error::InvalidArgument(
            "Reinhard normalization needs a non-constant image".into(),
        ));
    }
    Ok(lab
        .into_iter()
        .map(|v| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                out[c] = if src.std[c] < FLAT_CHANNEL_STD {
                    target.mean[c]
                } else {
                    (v[c] - src.mean[c]) * (target.std[c] / src.std[c]) + target.mean[c]
                };
            }
            out
        })
        .collect())
}

pub fn reinhard_normalize(img: &ImageU8, target: &LabStats) -> Result<ImageU8> {
    let lab = reinhard_transfer_lab(img, target)?;
    let data = lab
        .into_iter()
        .flat_map(|v| lab_to_rgb(v).map(|c| c.round().clamp(0.0, 255.0) as u8))
        .collect();
    ImageU8::new(img.width(), img.height(), data)
}

/// Which standardization a preprocessing run applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StainMethod {
    /// Macenko, falling back to Reinhard when estimation fails.
    #[default]
    Macenko,
    Reinhard,
    None,
}

/// Standard H&E reference directions used when no reference image is designated.
pub fn default_reference_profile() -> StainProfile {
    StainProfile::new(
        [0.5626, 0.7201, 0.4062],
        [0.2159, 0.8012, 0.5581],
        [1.9705, 1.0308],
    )
    .expect("constant profile is valid")
}

/// Deterministic two-stain tile rendered from [`default_reference_profile`]; its lαβ
/// statistics serve as the default Reinhard target.
pub fn default_reference_image() -> ImageU8 {
    let p = default_reference_profile();
    let (h, e) = (p.stain_matrix[0], p.stain_matrix[1]);
    ImageU8::from_fn(64, 64, |x, y| {
        let ch = ((x * 7 + y * 13) % 64) as f64 / 64.0 * 1.2;
        let ce = ((x * 11 + y * 5) % 64) as f64 / 64.0 * 0.8;
        let mut rgb = [0u8; 3];
        for k in 0..3 {
            rgb[k] = od_to_u8(ch * h[k] + ce * e[k], DEFAULT_I0 as f64);
        }
        rgb
    })
}
