//! Grayscale image helpers: padding, bilinear resizing and PNG I/O.

use std::path::Path;

use ndarray::Array2;

use crate::audit::AccessAudit;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Centers the image on a square zero canvas whose side is the longer axis.
/// An odd surplus puts the extra row/column after the content.
pub fn pad_to_square<T: Scalar>(image: &Array2<T>) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("zero-sized image {h}x{w}")));
    }
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut out = Array2::zeros((side, side));
    out.slice_mut(ndarray::s![top..top + h, left..left + w])
        .assign(image);
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Scalar>(image: &Array2<T>, out_h: usize, out_w: usize) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let v00 = to_f64(image[[y0, x0]]);
            let v01 = to_f64(image[[y0, x1]]);
            let v10 = to_f64(image[[y1, x0]]);
            let v11 = to_f64(image[[y1, x1]]);
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[[oy, ox]] = lit(top + (bot - top) * wy);
        }
    }
    Ok(out)
}

/// Zero-pads to a centered square, then resizes to `target x target`.
pub fn pad_and_resize<T: Scalar>(image: &Array2<T>, target: usize) -> Result<Array2<T>> {
    let square = pad_to_square(image)?;
    resize_bilinear(&square, target, target)
}

/// Reads an 8-bit grayscale PNG as values in `[0, 1]`.
pub fn read_gray_png(path: &Path, audit: &AccessAudit) -> Result<Array2<f32>> {
    audit.record(path);
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data: Vec<f32> = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("buffer matches dimensions"))
}

/// Reads a binary mask PNG; any nonzero pixel is foreground.
pub fn read_mask_png(path: &Path, audit: &AccessAudit) -> Result<Array2<bool>> {
    Ok(read_gray_png(path, audit)?.mapv(|v| v > 0.0))
}

pub fn to_u8<T: Scalar>(image: &Array2<T>) -> Vec<u8> {
    image
        .iter()
        .map(|&v| (to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_gray_png<T: Scalar>(path: &Path, image: &Array2<T>) -> Result<()> {
    let (h, w) = image.dim();
    write_u8_png(path, w as u32, h as u32, to_u8(image))
}

pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let data = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    write_u8_png(path, w as u32, h as u32, data)
}

fn write_u8_png(path: &Path, w: u32, h: u32, data: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::GrayImage::from_raw(w, h, data).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

pub fn write_rgb_png(path: &Path, w: u32, h: u32, data: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::RgbImage::from_raw(w, h, data).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
