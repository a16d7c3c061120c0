//! File formats: raw little-endian `f32` arrays with JSON sidecars, CSV
//! tables and checksums.
//!
//! An array stored at `mask.f32` has its metadata at `mask.f32.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PsfError, Result};
use crate::optics::{Image, OpticalConfig, PhaseMask};

/// Sidecar of a stored phase mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskMeta {
    pub n: usize,
    pub fft_pad: usize,
    pub wavelength_um: f64,
    pub na: f64,
    pub n_immersion: f64,
    pub n_sample: f64,
}

impl MaskMeta {
    pub fn new(config: &OpticalConfig, n: usize, fft_pad: usize) -> Self {
        Self {
            n,
            fft_pad,
            wavelength_um: config.wavelength_um,
            na: config.na,
            n_immersion: config.n_immersion,
            n_sample: config.n_sample,
        }
    }

    /// Whether a mask with this metadata can be used with `config`.
    pub fn compatible(&self, config: &OpticalConfig, n: usize) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        self.n == n
            && close(self.wavelength_um, config.wavelength_um)
            && close(self.na, config.na)
            && close(self.n_immersion, config.n_immersion)
            && close(self.n_sample, config.n_sample)
    }
}

/// Sidecar of a stored image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    pub pitch_um: f64,
    pub shape: [usize; 2],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PsfError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PsfError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PsfError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PsfError::format(path, e))
}

fn write_raw(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| PsfError::io(path, e))
}

fn read_raw(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| PsfError::io(path, e))?;
    if bytes.len() != shape.0 * shape.1 * 4 {
        return Err(PsfError::format(
            path,
            format!("{} bytes, expected {} for shape {shape:?}", bytes.len(), shape.0 * shape.1 * 4),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec(shape, data).map_err(|e| PsfError::format(path, e))
}

pub fn write_mask(path: &Path, mask: &PhaseMask, meta: &MaskMeta) -> Result<()> {
    write_raw(path, &mask.values)?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_mask(path: &Path) -> Result<(PhaseMask, MaskMeta)> {
    let meta: MaskMeta = read_json(&sidecar_path(path))?;
    let values = read_raw(path, (meta.n, meta.n))?;
    let mask = PhaseMask::new(values).map_err(|e| PsfError::format(path, e))?;
    Ok((mask, meta))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.shape();
    write_raw(path, &img.pixels)?;
    write_json(
        &sidecar_path(path),
        &ImageMeta {
            pitch_um: img.pitch_um,
            shape: [h, w],
        },
    )
}

pub fn read_image(path: &Path) -> Result<Image> {
    let meta: ImageMeta = read_json(&sidecar_path(path))?;
    let pixels = read_raw(path, (meta.shape[0], meta.shape[1]))?;
    Ok(Image {
        pixels,
        pitch_um: meta.pitch_um,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PsfError::format(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| PsfError::format(path, e))?;
    }
    w.flush().map_err(|e| PsfError::io(path, e))
}

/// Write a CSV that still carries its header when `rows` is empty.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| PsfError::format(path, e))?;
    w.write_record(header).map_err(|e| PsfError::format(path, e))?;
    w.flush().map_err(|e| PsfError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PsfError::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| PsfError::format(path, e)))
        .collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PsfError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let values = Array2::from_shape_fn((16, 16), |(r, c)| (r as f64 - c as f64) * 0.25);
        let mask = PhaseMask::new(values.clone()).unwrap();
        let meta = MaskMeta::new(&OpticalConfig::default(), 16, 2);
        write_mask(&p, &mask, &meta).unwrap();
        let (back, m2) = read_mask(&p).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back.values, values);
        assert!(sidecar_path(&p).ends_with("m.f32.json"));
    }

    #[test]
    fn truncated_raw_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.f32");
        write_image(&p, &Image::zeros(3, 4, 0.11)).unwrap();
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(matches!(read_image(&p), Err(PsfError::Format { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_image(Path::new("/nonexistent/x.f32")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.f32.json"));
    }
}
