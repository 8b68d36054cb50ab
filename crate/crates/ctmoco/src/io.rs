//! Raw `f32` grids with JSON sidecars, plus PNG previews.
//!
//! A grid `name.f32raw` holds `height·width` little-endian `f32` values in
//! row-major order; `name.json` next to it carries the header. Sinograms use
//! the same layout (one row per view) and add the acquisition geometry to the
//! header.

use std::fs;
use std::path::{Path, PathBuf};

use ctmoco_core::ctrecon::{FanBeamGeometry, Sinogram};
use ctmoco_core::Image;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DTYPE: &str = "float32";
pub const BYTE_ORDER: &str = "little";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    pub dtype: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<FanBeamGeometry>,
}

impl GridHeader {
    fn new(height: usize, width: usize, spacing_mm: f64) -> Self {
        Self {
            height,
            width,
            spacing_mm,
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
            geometry: None,
        }
    }
}

/// `x.f32raw` → `x.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let header = GridHeader::new(image.height(), image.width(), image.spacing());
    write_grid(&header, image.data(), path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (header, data) = read_grid(path)?;
    Image::new(header.height, header.width, header.spacing_mm, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_sinogram(sinogram: &Sinogram, path: &Path) -> Result<()> {
    let g = sinogram.geometry();
    let mut header = GridHeader::new(g.n_views, g.detector_bins, g.bin_spacing_mm);
    header.geometry = Some(*g);
    write_grid(&header, sinogram.data(), path)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let (header, data) = read_grid(path)?;
    let geometry = header
        .geometry
        .ok_or_else(|| Error::format(path, "header has no geometry block"))?;
    if header.height != geometry.n_views || header.width != geometry.detector_bins {
        return Err(Error::format(
            path,
            format!(
                "{}x{} grid does not match {} views x {} bins",
                header.height, header.width, geometry.n_views, geometry.detector_bins
            ),
        ));
    }
    Sinogram::new(geometry, data).map_err(|e| Error::format(path, e.to_string()))
}

fn write_grid(header: &GridHeader, data: &[f64], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::format(path, format!("value {v} is not representable as f32")));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    write_json(&sidecar_path(path), header)
}

fn read_grid(path: &Path) -> Result<(GridHeader, Vec<f64>)> {
    let header: GridHeader = read_json(&sidecar_path(path))?;
    if header.dtype != DTYPE || header.byte_order != BYTE_ORDER {
        return Err(Error::format(
            path,
            format!("unsupported dtype/byte order {}/{}", header.dtype, header.byte_order),
        ));
    }
    let bytes = read_bytes(path)?;
    let expected = header.height * header.width;
    if bytes.len() != 4 * expected {
        return Err(Error::format(
            path,
            format!(
                "header says {}x{} ({expected} values), payload has {} bytes",
                header.height,
                header.width,
                bytes.len()
            ),
        ));
    }
    let data = f32_from_le(&bytes).into_iter().map(f64::from).collect();
    Ok((header, data))
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Maps `[lo, hi]` linearly onto 0..=255, clamping outside.
fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (u * 255.0).round() as u8
}

/// 8-bit grayscale preview with the display window `[lo, hi]`.
pub fn write_png(image: &Image, lo: f64, hi: f64, path: &Path) -> Result<()> {
    write_panel(&[vec![image]], lo, hi, path)
}

/// Tiles rows of images into one PNG, separated by 2-pixel white gutters.
/// Cells are top-left aligned; smaller images leave the rest of a cell black.
pub fn write_panel(rows: &[Vec<&Image>], lo: f64, hi: f64, path: &Path) -> Result<()> {
    const GAP: usize = 2;
    if !(hi > lo) {
        return Err(Error::Config(format!("display window [{lo}, {hi}] is empty")));
    }
    let cell_h = rows.iter().flatten().map(|i| i.height()).max().unwrap_or(0);
    let cell_w = rows.iter().flatten().map(|i| i.width()).max().unwrap_or(0);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if cell_h == 0 || cols == 0 {
        return Err(Error::format(path, "panel has no images"));
    }
    let width = cols * cell_w + (cols - 1) * GAP;
    let height = rows.len() * cell_h + (rows.len() - 1) * GAP;
    let mut canvas = image::GrayImage::from_pixel(width as u32, height as u32, image::Luma([255]));
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            let (y0, x0) = (i * (cell_h + GAP), j * (cell_w + GAP));
            for y in 0..cell_h {
                for x in 0..cell_w {
                    let v = if y < img.height() && x < img.width() {
                        to_gray(img.get(y, x), lo, hi)
                    } else {
                        0
                    };
                    canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Luma([v]));
                }
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_window_clamps() {
        assert_eq!(to_gray(-1.0, 0.0, 1.0), 0);
        assert_eq!(to_gray(0.5, 0.0, 1.0), 128);
        assert_eq!(to_gray(7.0, 0.0, 1.0), 255);
    }

    #[test]
    fn f32_overflow_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(1, 1, 1.0, vec![1e300]).unwrap();
        assert!(matches!(
            write_image(&img, &dir.path().join("x.f32raw")),
            Err(Error::Format { .. })
        ));
    }
}
