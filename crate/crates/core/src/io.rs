//! PNG, JSON and manifest I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap};
use crate::toybench::{DatasetManifest, Domain};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn codec(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (RGB for 3 channels, grayscale for 1).
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (image.height(), image.width());
    let result = if image.channels() == 3 {
        let mut raw = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                raw.push(quantize(image.channel(c)[i]));
            }
        }
        RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer size matches dims")
            .save(path)
    } else {
        let raw = image.channel(0).iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer size matches dims")
            .save(path)
    };
    result.map_err(|e| codec(path, e))
}

/// Reads any PNG as 8-bit RGB scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| codec(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = raw[i * 3 + c] as f64 / 255.0;
        }
    }
    ImageTensor::new(h, w, 3, data)
}

/// Writes a label map as a single-channel 8-bit PNG of class indices.
pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    GrayImage::from_raw(label.width() as u32, label.height() as u32, label.data().to_vec())
        .expect("buffer size matches dims")
        .save(path)
        .map_err(|e| codec(path, e))
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| codec(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(Error::InvalidInput(format!(
            "label map {} must be single-channel",
            path.display()
        )));
    }
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    LabelMap::new(h, w, gray.into_raw())
}

/// Width and height from the PNG header, without decoding pixels.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| codec(path, e))?;
    Ok((h as usize, w as usize))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_json(path, manifest)
}

/// Parses and validates a manifest: non-empty entries, the 5-class part
/// catalog, labels on every source entry, existing files, and label maps
/// matching their images' dims.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let invalid = |reason: String| Error::InvalidManifest {
        path: path.to_path_buf(),
        reason,
    };
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
        let context = text
            .lines()
            .nth(e.line().saturating_sub(1))
            .map(|l| l.trim().to_string())
            .unwrap_or_default();
        invalid(format!(
            "{e} (line {}, column {}: `{context}`)",
            e.line(),
            e.column()
        ))
    })?;
    if manifest.entries.is_empty() {
        return Err(invalid("entries array is empty".into()));
    }
    if manifest.classes != crate::toybench::default_class_catalog() {
        return Err(invalid(format!(
            "class catalog {:?} does not match the part catalog {:?}",
            manifest.classes,
            crate::CLASS_NAMES
        )));
    }
    let base = manifest_dir(path);
    for (i, entry) in manifest.entries.iter().enumerate() {
        let name = format!("entry {i} ({})", entry.image);
        if entry.domain == Domain::Source && entry.label.is_none() {
            return Err(invalid(format!("{name}: source entries need a label")));
        }
        let image_path = base.join(&entry.image);
        if !image_path.is_file() {
            return Err(invalid(format!("{name}: image file {} not found", image_path.display())));
        }
        let dims = image_dims(&image_path)?;
        if let Some(label) = &entry.label {
            let label_path = base.join(label);
            if !label_path.is_file() {
                return Err(invalid(format!("{name}: label file {} not found", label_path.display())));
            }
            let label_dims = image_dims(&label_path)?;
            if label_dims != dims {
                return Err(invalid(format!(
                    "{name}: label is {}x{} but image is {}x{}",
                    label_dims.0, label_dims.1, dims.0, dims.1
                )));
            }
        }
    }
    Ok(manifest)
}

/// Directory entry paths are resolved against.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::{generate_split, ManifestEntry, Split};

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let label = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        save_label(&path, &label).unwrap();
        assert_eq!(load_label(&path).unwrap(), label);
    }

    #[test]
    fn image_png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/i.png");
        let img = ImageTensor::new(1, 2, 3, vec![0.0, 1.0, 0.5, 0.25, 0.2, 0.9]).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let original = generate_split(2, 2, 1, 7, 32, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        assert_eq!(load_manifest(&path).unwrap(), original);

        let mut empty = original.clone();
        empty.entries.clear();
        save_manifest(&path, &empty).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::InvalidManifest { .. })));

        // wrong-size label for the second entry
        let mut manifest = original;
        save_label(
            &dir.path().join("labels/bad.png"),
            &LabelMap::filled(8, 8, 0).unwrap(),
        )
        .unwrap();
        manifest.entries[1].label = Some("labels/bad.png".into());
        save_manifest(&path, &manifest).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("entry 1"), "{err}");
        assert!(err.contains("8x8"), "{err}");
    }

    #[test]
    fn syntax_errors_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, "{\n  \"canvas\": 64,\n  \"seed\": oops\n}").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn source_without_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
        save_image(&dir.path().join("a.png"), &img).unwrap();
        let manifest = DatasetManifest {
            canvas: 4,
            seed: 0,
            classes: crate::toybench::default_class_catalog(),
            entries: vec![ManifestEntry {
                image: "a.png".into(),
                label: None,
                domain: Domain::Source,
                split: Split::Train,
                seed: 0,
            }],
        };
        let path = dir.path().join("m.json");
        save_manifest(&path, &manifest).unwrap();
        assert!(load_manifest(&path).unwrap_err().to_string().contains("need a label"));
    }
}
