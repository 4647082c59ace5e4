//! Atomic artifact writes and PNG helpers.

use std::io::Write;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temporary file in the same directory and a
/// rename, so readers never observe a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .expect("png encoding into memory");
    buf
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .expect("png encoding into memory");
    buf
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    atomic_write(path, &encode_rgb_png(img))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    atomic_write(path, &encode_gray_png(img))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    Ok(open_image(path)?.to_rgb8())
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    Ok(open_image(path)?.to_luma8())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
