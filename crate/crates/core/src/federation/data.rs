//! Loading a manifest-indexed dataset into memory and splitting it by specimen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{read_manifest, ImageU8, PatchRecord, MANIFEST_FILE, PATCH_DIR};
use crate::labels::{Grade, NUM_GRADES};

/// An image with its manifest row.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: PatchRecord,
    pub image: Arc<ImageU8>,
}

impl Sample {
    pub fn label(&self) -> Grade {
        self.record.label
    }
}

/// Where image files live relative to the dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `patches/<source>__<gx>_<gy>.png`, as written by preprocessing.
    Patches,
    /// `<grade>/<magnification>/<source>.png`, as written by the generator.
    Structured,
}

pub fn detect_layout(root: &Path) -> Layout {
    if root.join(PATCH_DIR).is_dir() {
        Layout::Patches
    } else {
        Layout::Structured
    }
}

pub fn image_path(root: &Path, layout: Layout, record: &PatchRecord) -> PathBuf {
    match layout {
        Layout::Patches => root.join(PATCH_DIR).join(record.patch_file_name()),
        Layout::Structured => record.raw_image_path(root),
    }
}

/// Reads the manifest and every image it references.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let records = read_manifest(&root.join(MANIFEST_FILE))?;
    let layout = detect_layout(root);
    records
        .into_par_iter()
        .map(|record| {
            let image = ImageU8::read_png(&image_path(root, layout, &record))?;
            Ok(Sample {
                record,
                image: Arc::new(image),
            })
        })
        .collect()
}

/// Indices into a sample list for the three evaluation splits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Specimen groups in first-appearance order: `(specimen key, label, sample indices)`.
pub fn specimen_groups(records: &[&PatchRecord]) -> Result<Vec<(String, Grade, Vec<usize>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Grade, Vec<usize>)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r.specimen().to_string();
        match groups.get_mut(&key) {
            Some((label, members)) => {
                if *label != r.label {
                    return Err(Error::InvalidArgument(format!(
                        "specimen {key} carries two labels"
                    )));
                }
                members.push(i);
            }
            None => {
                order.push(key.clone());
                groups.insert(key, (r.label, vec![i]));
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let (label, members) = groups.remove(&k).unwrap();
            (k, label, members)
        })
        .collect())
}

/// Splits by specimen so every magnification of one specimen lands in the same split,
/// stratified by grade. Specimens of each grade are shuffled with `seed` and cut at
/// `round(n · train)` and `round(n · (train + val))`.
pub fn split_by_specimen(
    records: &[&PatchRecord],
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<Splits> {
    let groups = specimen_groups(records)?;
    let mut by_grade: [Vec<usize>; NUM_GRADES] = Default::default();
    for (gi, (_, label, _)) in groups.iter().enumerate() {
        by_grade[label.index()].push(gi);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for members in by_grade.iter_mut() {
        // Sorting by key first makes the split independent of manifest row order.
        members.sort_by(|&a, &b| groups[a].0.cmp(&groups[b].0));
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let cut_train = (n * train_fraction).round() as usize;
        let cut_val = ((n * (train_fraction + val_fraction)).round() as usize).max(cut_train);
        for (pos, &gi) in members.iter().enumerate() {
            let target = if pos < cut_train {
                &mut splits.train
            } else if pos < cut_val {
                &mut splits.val
            } else {
                &mut splits.test
            };
            target.extend_from_slice(&groups[gi].2);
        }
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}
