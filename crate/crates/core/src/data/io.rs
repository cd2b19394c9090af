//! Dataset directories and PNG images.
//!
//! A dataset directory holds ground-truth images as `*.ctf` or grayscale
//! `*.png` files. Measurements are optional: `truth_XXXX` pairs with
//! `kspace_XXXX.ctf` when a `mask.ctf`/`mask.json` pair is present.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mri::{CartesianMask, Measurement};
use crate::tensor::ctf::load_image;
use crate::tensor::ComplexImage;

pub const MASK_STEM: &str = "mask";
pub const TRUTH_PREFIX: &str = "truth_";
pub const KSPACE_PREFIX: &str = "kspace_";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: ComplexImage,
    pub measurement: Option<Measurement>,
}

/// Reads an 8- or 16-bit grayscale PNG, scaled so the largest code is 1.
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<ComplexImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(
            path,
            format!("{:?} is not grayscale", info.color_type),
        ));
    }
    let values: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|r| buf[r * info.line_size..r * info.line_size + w].to_vec())
            .map(|b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|r| {
                let row = &buf[r * info.line_size..r * info.line_size + 2 * w];
                row.chunks_exact(2)
                    .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / 65535.0)
                    .collect::<Vec<_>>()
            })
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };
    ComplexImage::from_real(h, w, &values)
}

/// Writes real values in `[0, 1]` (clamped) as a grayscale PNG.
pub fn write_png_gray(
    values: &[f64],
    height: usize,
    width: usize,
    sixteen_bit: bool,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let data: Vec<u8> = if sixteen_bit {
        enc.set_depth(png::BitDepth::Sixteen);
        values
            .iter()
            .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
            .collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    };
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Display preview: magnitude clamped to `[0, 1]` and gamma-encoded.
pub fn write_png_preview(img: &ComplexImage, path: impl AsRef<Path>) -> Result<()> {
    let v: Vec<f64> = img
        .magnitude()
        .iter()
        .map(|m| m.clamp(0.0, 1.0).powf(1.0 / 2.2))
        .collect();
    write_png_gray(&v, img.height(), img.width(), false, path)
}

fn load_image_file(path: &Path) -> Result<ComplexImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ctf") => load_image(path),
        Some("png") => read_png_gray(path),
        _ => Err(Error::format(path, "unsupported extension")),
    }
}

/// Loads every image of `dir` in lexicographic stem order. A `.ctf` file
/// shadows a `.png` with the same stem. Unreadable files are skipped with a
/// warning.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        if stem.starts_with(KSPACE_PREFIX) || stem == MASK_STEM {
            continue;
        }
        match ext {
            "ctf" => {
                stems.insert(stem, path);
            }
            "png" => {
                stems.entry(stem).or_insert(path);
            }
            _ => {}
        }
    }
    let mask = if dir.join(format!("{MASK_STEM}.ctf")).exists() {
        Some(CartesianMask::load(dir, MASK_STEM)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for (stem, path) in stems {
        let image = match load_image_file(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let measurement = match (stem.strip_prefix(TRUTH_PREFIX), &mask) {
            (Some(suffix), Some(mask)) => {
                let kpath = dir.join(format!("{KSPACE_PREFIX}{suffix}.ctf"));
                if kpath.exists() {
                    Some(Measurement::new(load_image(&kpath)?, mask.clone(), 0.0)?)
                } else {
                    None
                }
            }
            _ => None,
        };
        out.push(Sample {
            name: stem,
            image,
            measurement,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Writes `truth_XXXX.ctf` (and `kspace_XXXX.ctf` plus the mask when
/// measurements are given) in the layout read by [`load_dataset`].
pub fn save_dataset(
    dir: impl AsRef<Path>,
    truths: &[ComplexImage],
    measurements: Option<&[Measurement]>,
) -> Result<Vec<PathBuf>> {
    use crate::tensor::ctf::save_image;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, t) in truths.iter().enumerate() {
        let p = dir.join(format!("{TRUTH_PREFIX}{i:04}.ctf"));
        save_image(t, &p)?;
        written.push(p);
    }
    if let Some(ms) = measurements {
        if let Some(first) = ms.first() {
            first.mask.save(dir, MASK_STEM)?;
            written.push(dir.join(format!("{MASK_STEM}.ctf")));
            written.push(dir.join(format!("{MASK_STEM}.json")));
        }
        for (i, m) in ms.iter().enumerate() {
            let p = dir.join(format!("{KSPACE_PREFIX}{i:04}.ctf"));
            save_image(&m.kspace, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.0, 0.5, 1.0, 0.25];
        write_png_gray(&vals, 2, 2, true, dir.path().join("a.png")).unwrap();
        let img = read_png_gray(dir.path().join("a.png")).unwrap();
        assert_eq!(img.get(0, 0).re, 0.0);
        assert_eq!(img.get(1, 0).re, 1.0);
        write_png_gray(&vals, 2, 2, false, dir.path().join("b.png")).unwrap();
        let img = read_png_gray(dir.path().join("b.png")).unwrap();
        assert!((img.get(0, 1).re - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn ctf_shadows_png_and_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        let img = ComplexImage::from_real(2, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        write_png_gray(&[1.0; 4], 2, 2, false, dir.path().join("x.png")).unwrap();
        crate::tensor::ctf::save_image(&img, dir.path().join("x.ctf")).unwrap();
        std::fs::write(dir.path().join("y.png"), b"not a png").unwrap();
        let set = load_dataset(dir.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].image, img);
    }
}
