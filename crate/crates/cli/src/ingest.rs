//! Reading raw labelled images from a structured folder tree or a ZIP archive.
//!
//! Both inputs use the layout `[prefix/]<grade>/<magnification>/<name>.png`. The file stem
//! becomes the source id.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use fedpath_core::imaging::{ImageU8, RawImage};
use fedpath_core::{Error, Grade, Magnification, Result};

/// Labels from the last three path components `<grade>/<magnification>/<file>.png`.
fn parse_labels(components: &[&str]) -> Option<(Grade, Magnification, String)> {
    let [.., grade, mag, file] = components else {
        return None;
    };
    let stem = file
        .strip_suffix(".png")
        .or_else(|| file.strip_suffix(".PNG"))?;
    Some((grade.parse().ok()?, mag.parse().ok()?, stem.to_string()))
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    Ok(())
}

fn push_unique(images: &mut Vec<RawImage>, raw: RawImage) -> Result<()> {
    if images.iter().any(|r| r.source_id == raw.source_id) {
        return Err(Error::InvalidArgument(format!(
            "duplicate source id `{}`",
            raw.source_id
        )));
    }
    images.push(raw);
    Ok(())
}

pub fn read_folder(root: &Path) -> Result<Vec<RawImage>> {
    let mut paths = Vec::new();
    collect_pngs(root, &mut paths)?;
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
        let Some((label, magnification, source_id)) = parse_labels(&parts) else {
            continue;
        };
        let raw = RawImage {
            source_id,
            magnification,
            label,
            image: ImageU8::read_png(&path)?,
        };
        push_unique(&mut images, raw)?;
    }
    Ok(images)
}

pub fn read_zip(path: &Path) -> Result<Vec<RawImage>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive =
        zip::ZipArchive::new(file).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut images = Vec::new();
    for i in 0..archive.len() {
        let mut entry = archive
            .by_index(i)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if entry.is_dir() {
            continue;
        }
        let name = entry.name().to_string();
        let parts: Vec<&str> = name.split('/').filter(|p| !p.is_empty()).collect();
        let Some((label, magnification, source_id)) = parse_labels(&parts) else {
            continue;
        };
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.join(&name), e))?;
        let raw = RawImage {
            source_id,
            magnification,
            label,
            image: ImageU8::decode_png_bytes(&bytes)?,
        };
        push_unique(&mut images, raw)?;
    }
    images.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(images)
}

/// Dispatches on the input kind: directories are walked, anything else must be a ZIP.
pub fn read_input(input: &Path) -> Result<Vec<RawImage>> {
    if input.is_dir() {
        read_folder(input)
    } else if input.is_file() {
        read_zip(input)
    } else {
        Err(Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        ))
    }
}
