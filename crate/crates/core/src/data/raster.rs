//! Probability rasters: an 8-bit PNG preview plus a lossless `.f32`
//! sidecar (`"XDSSLF32"`, u32 LE height, u32 LE width, f32 LE values).

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::image::{read_gray_png, write_gray_png};
use crate::audit::AccessAudit;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XDSSLF32";

pub fn write_f32_raster(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_f32_raster(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse = |offset: u64, reason: &str| Error::Parse {
        offset,
        reason: format!("{}: {reason}", path.display()),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(parse(0, "not a probability raster"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return Err(parse(16, "payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((h, w), data).expect("length checked"))
}

/// Writes `<dir>/<id>.f32` and `<dir>/<id>.png`.
pub fn write_probability(dir: &Path, id: &str, map: &Array2<f32>) -> Result<()> {
    write_f32_raster(&dir.join(format!("{id}.f32")), map)?;
    write_gray_png(&dir.join(format!("{id}.png")), map)
}

/// Path of the prediction for `id`, preferring the lossless sidecar.
pub fn probability_path(dir: &Path, id: &str) -> Option<PathBuf> {
    ["f32", "png"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads a probability map from the sidecar or, failing that, the PNG
/// (`value / 255`).
pub fn read_probability(dir: &Path, id: &str, audit: &AccessAudit) -> Result<Option<Array2<f32>>> {
    match probability_path(dir, id) {
        None => Ok(None),
        Some(p) if p.extension().is_some_and(|e| e == "f32") => read_f32_raster(&p).map(Some),
        Some(p) => read_gray_png(&p, audit).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f32 / 14.0);
        write_probability(dir.path(), "a", &map).unwrap();
        let audit = AccessAudit::new();
        assert_eq!(read_probability(dir.path(), "a", &audit).unwrap().unwrap(), map);
        std::fs::remove_file(dir.path().join("a.f32")).unwrap();
        let png = read_probability(dir.path(), "a", &audit).unwrap().unwrap();
        for (a, b) in png.iter().zip(map.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(read_probability(dir.path(), "b", &audit).unwrap().is_none());
        std::fs::write(dir.path().join("c.f32"), b"XDSSLF32\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(read_f32_raster(&dir.path().join("c.f32")), Err(Error::Parse { .. })));
    }
}
