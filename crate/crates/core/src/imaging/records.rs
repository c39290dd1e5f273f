//! Patch records and the JSON-lines manifest format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::labels::{Grade, Magnification};

/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Sub-directory holding preprocessed patches.
pub const PATCH_DIR: &str = "patches";

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub source_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub magnification: Magnification,
    pub tissue_fraction: f64,
    pub focus_score: f64,
    #[serde(serialize_with = "hash_to_hex", deserialize_with = "hash_from_hex")]
    pub dhash: u64,
    pub label: Grade,
}

fn hash_to_hex<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:016x}"))
}

fn hash_from_hex<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    let s = String::deserialize(d)?;
    u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
}

impl PatchRecord {
    /// File name of the patch image inside [`PATCH_DIR`].
    pub fn patch_file_name(&self) -> String {
        format!("{}__{}_{}.png", self.source_id, self.grid_x, self.grid_y)
    }

    /// Path of a raw (whole) image in a structured `<grade>/<magnification>/` tree.
    pub fn raw_image_path(&self, root: &Path) -> PathBuf {
        root.join(self.label.dir_name())
            .join(self.magnification.as_str())
            .join(format!("{}.png", self.source_id))
    }

    /// Specimen grouping key: the source id without a trailing `@<magnification>` tag.
    pub fn specimen(&self) -> &str {
        self.source_id
            .rsplit_once('@')
            .map_or(self.source_id.as_str(), |(head, _)| head)
    }
}

pub fn write_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PatchRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.tissue_fraction) || !(record.focus_score >= 0.0) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "tissue_fraction or focus_score out of range".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> PatchRecord {
        PatchRecord {
            source_id: "g1_0003@10x".into(),
            grid_x: 2,
            grid_y: 5,
            magnification: Magnification::X10,
            tissue_fraction: 0.42,
            focus_score: 88.5,
            dhash: 0x00ff_1234_abcd_0001,
            label: Grade::GradeI,
        }
    }

    #[test]
    fn field_names_and_hex_hash() {
        let json = serde_json::to_value(record()).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "dhash",
                "focus_score",
                "grid_x",
                "grid_y",
                "label",
                "magnification",
                "source_id",
                "tissue_fraction"
            ]
        );
        assert_eq!(json["dhash"], "00ff1234abcd0001");
        assert_eq!(json["label"], "GradeI");
        assert_eq!(json["magnification"], "10x");
    }

    #[test]
    fn malformed_row_reports_line() {
        let good = serde_json::to_string(&record()).unwrap();
        let text = format!("{good}\n{{\"source_id\": 3}}\n");
        match parse_manifest(&text, Path::new("m.jsonl")) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            parse_manifest(&good, Path::new("m")).unwrap(),
            vec![record()]
        );
    }

    #[test]
    fn specimen_strips_magnification_tag() {
        assert_eq!(record().specimen(), "g1_0003");
        let mut r = record();
        r.source_id = "plain".into();
        assert_eq!(r.specimen(), "plain");
    }
}
