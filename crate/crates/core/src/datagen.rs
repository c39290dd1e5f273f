//! Seeded synthetic H&E-style dataset with three grades at four magnifications.
//!
//! Each specimen is a vector scene (glands, nuclei, stromal fibres) laid out on a
//! `base_size`² canvas. A magnification level views a centred window of side
//! `crop_factor · base_size` and renders it straight to `image_size` pixels, so higher
//! magnification resolves nuclear detail instead of upsampling a low-resolution image.
//!
//! The grade of the specimen is carried by a central tumour disc. Tissue outside that disc
//! is split into sectors drawn with random grade styles, so wide fields mix in
//! label-independent structure while narrow fields see the tumour only.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::stain::{angle_deg, default_reference_profile};
use crate::imaging::{
    dhash64, laplacian_focus, tissue_mask, write_manifest, ImageU8, PatchRecord, MANIFEST_FILE,
};
use crate::labels::{Grade, Magnification, NUM_GRADES};

/// Appearance parameters of one grade. Every field is strictly monotone across grades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradeStyle {
    /// Amplitude of the harmonic distortion of gland outlines (0 = circle).
    pub ring_irregularity: f64,
    /// Lumen radius as a fraction of the gland radius (decreasing with grade).
    pub lumen_fraction: f64,
    /// Mean nucleus radius in base pixels.
    pub nucleus_radius: f64,
    /// Relative spread of nucleus radii and aspect ratios.
    pub pleomorphism: f64,
    /// Nuclei per 100 base px² of epithelium.
    pub nucleus_density: f64,
    /// Hematoxylin concentration inside nuclei.
    pub darkness: f64,
    /// Std of the per-pixel grain, in 8-bit levels.
    pub noise: f64,
}

impl GradeStyle {
    pub fn defaults() -> [GradeStyle; NUM_GRADES] {
        [
            GradeStyle {
                ring_irregularity: 0.04,
                lumen_fraction: 0.55,
                nucleus_radius: 1.9,
                pleomorphism: 0.08,
                nucleus_density: 1.2,
                darkness: 0.85,
                noise: 2.0,
            },
            GradeStyle {
                ring_irregularity: 0.16,
                lumen_fraction: 0.3,
                nucleus_radius: 2.6,
                pleomorphism: 0.22,
                nucleus_density: 2.2,
                darkness: 1.1,
                noise: 2.5,
            },
            GradeStyle {
                ring_irregularity: 0.32,
                lumen_fraction: 0.0,
                nucleus_radius: 3.4,
                pleomorphism: 0.4,
                nucleus_density: 3.4,
                darkness: 1.4,
                noise: 3.0,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    /// Relative class sizes; class `g` gets `round(n_per_class · class_weights[g])` specimens.
    pub class_weights: [f64; NUM_GRADES],
    pub base_size: usize,
    /// Side of every written image.
    pub image_size: usize,
    pub magnifications: Vec<Magnification>,
    /// Radius of the label-bearing tumour disc as a fraction of `base_size`.
    pub tumor_radius: f64,
    /// Per-specimen stain-vector perturbation, in degrees.
    pub stain_jitter_deg: f64,
    pub grades: [GradeStyle; NUM_GRADES],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 50,
            class_weights: [1.0; NUM_GRADES],
            base_size: 640,
            image_size: 320,
            magnifications: Magnification::ALL.to_vec(),
            tumor_radius: 0.3,
            stain_jitter_deg: 3.0,
            grades: GradeStyle::defaults(),
            seed: 7,
        }
    }
}

/// Side of the viewed window relative to the base canvas.
pub fn crop_factor(m: Magnification) -> f64 {
    match m {
        Magnification::X4 => 1.0,
        Magnification::X10 => 0.4,
        Magnification::X20 => 0.2,
        Magnification::X40 => 0.1,
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth spec: {msg}")));
        if self.base_size < 64 || self.image_size < 16 {
            return bad("base_size >= 64 and image_size >= 16 required".into());
        }
        if self.magnifications.is_empty() {
            return bad("no magnifications".into());
        }
        if self
            .class_weights
            .iter()
            .any(|&w| !(w > 0.0 && w.is_finite()))
        {
            return bad("class weights must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tumor_radius) {
            return bad("tumor_radius outside [0, 1]".into());
        }
        let g = &self.grades;
        let ordered = |f: fn(&GradeStyle) -> f64, increasing: bool| {
            g.windows(2).all(|w| {
                let (a, b) = (f(&w[0]), f(&w[1]));
                if increasing {
                    a < b
                } else {
                    a > b
                }
            })
        };
        let monotone = ordered(|s| s.ring_irregularity, true)
            && ordered(|s| s.lumen_fraction, false)
            && ordered(|s| s.nucleus_radius, true)
            && ordered(|s| s.pleomorphism, true)
            && ordered(|s| s.nucleus_density, true)
            && ordered(|s| s.darkness, true)
            && ordered(|s| s.noise, true);
        if !monotone {
            return bad("grade styles must be strictly ordered from I to III".into());
        }
        Ok(())
    }

    pub fn class_count(&self, g: Grade) -> usize {
        (self.n_per_class as f64 * self.class_weights[g.index()]).round() as usize
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ p))
}

#[derive(Debug, Clone)]
struct Gland {
    cx: f64,
    cy: f64,
    radius: f64,
    lumen: f64,
    harmonics: [(f64, f64); 3],
}

impl Gland {
    /// Radial coordinate normalized so the outline sits at 1.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let mut r = 1.0;
        for (k, &(amp, phase)) in self.harmonics.iter().enumerate() {
            r += amp * ((k + 2) as f64 * theta + phase).cos();
        }
        (dx * dx + dy * dy).sqrt() / (self.radius * r)
    }
}

#[derive(Debug, Clone)]
struct Nucleus {
    x: f64,
    y: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    darkness: f64,
}

/// Bucketed index over scene items for neighbourhood queries.
struct Grid {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<u32>>,
}

impl Grid {
    fn new(size: f64, cell: f64) -> Grid {
        let cols = (size / cell).ceil() as usize + 1;
        Grid {
            cell,
            cols,
            buckets: vec![Vec::new(); cols * cols],
        }
    }

    fn cell_of(&self, v: f64) -> usize {
        ((v / self.cell).floor().max(0.0) as usize).min(self.cols - 1)
    }

    fn insert(&mut self, id: usize, x: f64, y: f64, reach: f64) {
        for cy in self.cell_of(y - reach)..=self.cell_of(y + reach) {
            for cx in self.cell_of(x - reach)..=self.cell_of(x + reach) {
                self.buckets[cy * self.cols + cx].push(id as u32);
            }
        }
    }

    fn query(&self, x: f64, y: f64) -> &[u32] {
        &self.buckets[self.cell_of(y) * self.cols + self.cell_of(x)]
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// A specimen as a resolution-independent scene in base-pixel coordinates.
struct Scene {
    size: f64,
    glands: Vec<Gland>,
    gland_grid: Grid,
    nuclei: Vec<Nucleus>,
    nucleus_grid: Grid,
    fibres: Vec<Wave>,
    stains: [[f64; 3]; 2],
    noise: f64,
}

const SECTORS: usize = 6;

fn style_at(
    x: f64,
    y: f64,
    size: f64,
    tumor_radius: f64,
    sector_styles: &[usize; SECTORS],
    grade: usize,
) -> usize {
    let (dx, dy) = (x - size / 2.0, y - size / 2.0);
    if (dx * dx + dy * dy).sqrt() <= tumor_radius * size {
        grade
    } else {
        let t = (dy.atan2(dx) + PI) / (2.0 * PI);
        sector_styles[((t * SECTORS as f64) as usize).min(SECTORS - 1)]
    }
}

fn perturb(v: [f64; 3], deg: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let scale = deg.to_radians();
    let mut w = v;
    for c in w.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *c = (*c + n * scale * 0.6).max(0.02);
    }
    let n = w.iter().map(|c| c * c).sum::<f64>().sqrt();
    w.map(|c| c / n)
}

fn build_scene(spec: &SynthSpec, grade: Grade, rng: &mut ChaCha8Rng) -> Scene {
    let size = spec.base_size as f64;
    let g = grade.index();
    let mut sector_styles = [0usize; SECTORS];
    for s in sector_styles.iter_mut() {
        *s = rng.random_range(0..NUM_GRADES);
    }

    // Glands by dart throwing with a minimum gap.
    let mut glands: Vec<Gland> = Vec::new();
    let mut styles_of_gland = Vec::new();
    let target = (size * size / 3600.0) as usize;
    let mut attempts = 0;
    while glands.len() < target && attempts < target * 30 {
        attempts += 1;
        // The first gland sits on the centre so even the narrowest field shows tumour.
        let (cx, cy) = if glands.is_empty() {
            (size / 2.0, size / 2.0)
        } else {
            (rng.random_range(0.0..size), rng.random_range(0.0..size))
        };
        let st = style_at(cx, cy, size, spec.tumor_radius, &sector_styles, g);
        let style = &spec.grades[st];
        let radius = rng.random_range(20.0..34.0) * (1.0 + 0.25 * st as f64);
        if glands
            .iter()
            .any(|o| (o.cx - cx).hypot(o.cy - cy) < (o.radius + radius) * 0.95 + 4.0)
        {
            continue;
        }
        let mut harmonics = [(0.0, 0.0); 3];
        for h in harmonics.iter_mut() {
            *h = (
                style.ring_irregularity * rng.random_range(0.3..1.0),
                rng.random_range(0.0..2.0 * PI),
            );
        }
        let lumen = style.lumen_fraction * rng.random_range(0.85..1.15);
        glands.push(Gland {
            cx,
            cy,
            radius,
            lumen,
            harmonics,
        });
        styles_of_gland.push(st);
    }
    let mut gland_grid = Grid::new(size, 48.0);
    for (i, gl) in glands.iter().enumerate() {
        let reach = gl.radius * (1.0 + gl.harmonics.iter().map(|h| h.0).sum::<f64>()) + 1.0;
        gland_grid.insert(i, gl.cx, gl.cy, reach);
    }

    let mut nuclei = Vec::new();
    let mut add_nucleus = |rng: &mut ChaCha8Rng, x: f64, y: f64, style: &GradeStyle| {
        let p = style.pleomorphism;
        let r = style.nucleus_radius * (1.0 + p * rng.sample::<f64, _>(StandardNormal)).max(0.5);
        let aspect = 1.0 + p * rng.random_range(0.0..1.5);
        let angle = rng.random_range(0.0..PI);
        nuclei.push(Nucleus {
            x,
            y,
            rx: r * aspect.sqrt(),
            ry: r / aspect.sqrt(),
            cos: angle.cos(),
            sin: angle.sin(),
            darkness: style.darkness * rng.random_range(0.85..1.15),
        });
    };
    for (gl, &st) in glands.iter().zip(&styles_of_gland) {
        let style = &spec.grades[st];
        if gl.lumen > 0.05 {
            // Basal palisade of nuclei around the lumen.
            let ring_r = gl.radius * (gl.lumen + 1.0) / 2.0;
            let spacing = style.nucleus_radius * 2.6;
            let n = ((2.0 * PI * ring_r) / spacing).max(6.0) as usize;
            for k in 0..n {
                let th = 2.0 * PI * k as f64 / n as f64
                    + style.ring_irregularity * rng.random_range(-0.5..0.5);
                let mut rr = 1.0;
                for (h, &(amp, phase)) in gl.harmonics.iter().enumerate() {
                    rr += amp * ((h + 2) as f64 * th + phase).cos();
                }
                let jitter = style.ring_irregularity * gl.radius * rng.random_range(-0.3..0.3);
                let rad = ring_r * rr + jitter;
                add_nucleus(rng, gl.cx + rad * th.cos(), gl.cy + rad * th.sin(), style);
            }
        }
        // Scattered nuclei through the epithelium.
        let area = PI * gl.radius * gl.radius * (1.0 - gl.lumen * gl.lumen);
        let extra = (area / 100.0 * style.nucleus_density * (st as f64) / 2.0) as usize;
        let mut placed = 0;
        let mut tries = 0;
        while placed < extra && tries < extra * 10 {
            tries += 1;
            let (x, y) = (
                gl.cx + rng.random_range(-1.3..1.3) * gl.radius,
                gl.cy + rng.random_range(-1.3..1.3) * gl.radius,
            );
            let rho = gl.rho(x, y);
            if rho < 0.95 && rho > gl.lumen + 0.08 {
                add_nucleus(rng, x, y, style);
                placed += 1;
            }
        }
    }
    // Sparse stromal cells, identical for every grade.
    let stromal = (size * size / 900.0) as usize;
    let stroma_style = GradeStyle {
        nucleus_radius: 1.6,
        pleomorphism: 0.1,
        darkness: 0.9,
        ..spec.grades[0]
    };
    for _ in 0..stromal {
        let (x, y) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        add_nucleus(rng, x, y, &stroma_style);
    }
    let mut nucleus_grid = Grid::new(size, 12.0);
    for (i, n) in nuclei.iter().enumerate() {
        nucleus_grid.insert(i, n.x, n.y, n.rx.max(n.ry) + 1.5);
    }

    let fibres = (0..5)
        .map(|_| {
            let dir = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.15..0.45);
            Wave {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.03..0.07),
            }
        })
        .collect();

    let reference = default_reference_profile().stain_matrix;
    let stains = [
        perturb(reference[0], spec.stain_jitter_deg, rng),
        perturb(reference[1], spec.stain_jitter_deg, rng),
    ];
    debug_assert!(angle_deg(stains[0], stains[1]) > 5.0);
    Scene {
        size,
        glands,
        gland_grid,
        nuclei,
        nucleus_grid,
        fibres,
        stains,
        noise: spec.grades[g].noise,
    }
}

fn smoothstep(edge: f64, v: f64) -> f64 {
    // 1 inside (v < 0), 0 outside (v > edge), linear between.
    (1.0 - v / edge).clamp(0.0, 1.0)
}

impl Scene {
    /// `(hematoxylin, eosin)` concentrations at a base-space point; `edge` is the
    /// anti-aliasing width in base pixels.
    fn concentrations(&self, x: f64, y: f64, edge: f64) -> (f64, f64) {
        let fibre: f64 = self
            .fibres
            .iter()
            .map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin())
            .sum();
        let (mut h, mut e) = (0.04, 0.32 + fibre);
        for &gi in self.gland_grid.query(x, y) {
            let gl = &self.glands[gi as usize];
            let rho = gl.rho(x, y);
            let scale = edge / gl.radius;
            let inside = smoothstep(scale, rho - 1.0);
            if inside > 0.0 {
                let lumen = if gl.lumen > 0.0 {
                    smoothstep(scale, rho - gl.lumen)
                } else {
                    0.0
                };
                let epi = inside * (1.0 - lumen);
                h = h * (1.0 - inside) + 0.16 * epi + 0.01 * lumen * inside;
                e = e * (1.0 - inside) + 0.5 * epi + 0.05 * lumen * inside;
            }
        }
        for &ni in self.nucleus_grid.query(x, y) {
            let n = &self.nuclei[ni as usize];
            let (dx, dy) = (x - n.x, y - n.y);
            let u = (dx * n.cos + dy * n.sin) / n.rx;
            let v = (-dx * n.sin + dy * n.cos) / n.ry;
            let d = (u * u + v * v).sqrt();
            let r = n.rx.min(n.ry);
            let cover = smoothstep(edge / r, d - 1.0);
            if cover > 0.0 {
                // Slightly paler centre mimics chromatin texture.
                let core = n.darkness * (0.85 + 0.15 * d.min(1.0));
                h = h.max(core * cover + h * (1.0 - cover));
                e *= 1.0 - 0.5 * cover;
            }
        }
        (h, e)
    }

    /// Renders the centred window of side `crop · size` at `out × out` pixels.
    fn render(&self, crop: f64, out: usize, rng: &mut ChaCha8Rng) -> ImageU8 {
        let field = crop * self.size;
        let x0 = (self.size - field) / 2.0;
        let px = field / out as f64;
        let edge = (0.8 * px).max(0.35);
        let mut data = Vec::with_capacity(out * out * 3);
        for v in 0..out {
            for u in 0..out {
                let x = x0 + (u as f64 + 0.5) * px;
                let y = x0 + (v as f64 + 0.5) * px;
                let (ch, ce) = self.concentrations(x, y, edge);
                for c in 0..3 {
                    let od = ch * self.stains[0][c] + ce * self.stains[1][c];
                    let grain: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise;
                    let val = 255.0 * 10f64.powf(-od) + grain;
                    data.push(val.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ImageU8::new(out, out, data).expect("buffer sized for the image")
    }
}

/// One generated image.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub record: PatchRecord,
    pub image: ImageU8,
}

/// Specimen id such as `g2_0007`; images append `@<magnification>`.
pub fn specimen_id(grade: Grade, index: usize) -> String {
    format!("g{}_{index:04}", grade.index() + 1)
}

/// Renders every image of the spec in memory, ordered by (grade, specimen, magnification).
pub fn render_dataset(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    spec.validate()?;
    let jobs: Vec<(Grade, usize)> = Grade::ALL
        .iter()
        .flat_map(|&g| (0..spec.class_count(g)).map(move |i| (g, i)))
        .collect();
    let per_specimen: Vec<Vec<SynthImage>> = jobs
        .par_iter()
        .map(|&(grade, idx)| {
            let seed = stream_seed(spec.seed, &[grade.index() as u64, idx as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = build_scene(spec, grade, &mut rng);
            spec.magnifications
                .iter()
                .map(|&mag| {
                    let mut img_rng =
                        ChaCha8Rng::seed_from_u64(stream_seed(seed, &[mag.power() as u64]));
                    let image = scene.render(crop_factor(mag), spec.image_size, &mut img_rng);
                    let record = PatchRecord {
                        source_id: format!("{}@{}", specimen_id(grade, idx), mag),
                        grid_x: 0,
                        grid_y: 0,
                        magnification: mag,
                        tissue_fraction: tissue_mask(&image).tissue_fraction,
                        focus_score: laplacian_focus(&image),
                        dhash: dhash64(&image),
                        label: grade,
                    };
                    SynthImage { record, image }
                })
                .collect()
        })
        .collect();
    Ok(per_specimen.into_iter().flatten().collect())
}

/// Writes `<out>/<grade_dir>/<mag>/<source_id>.png` plus `<out>/manifest.jsonl`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Vec<PatchRecord>> {
    let images = render_dataset(spec)?;
    images.par_iter().try_for_each(|s| {
        let path = s.record.raw_image_path(out);
        let dir = path.parent().expect("image path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        s.image.write_png(&path)
    })?;
    let records: Vec<PatchRecord> = images.into_iter().map(|s| s.record).collect();
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}
