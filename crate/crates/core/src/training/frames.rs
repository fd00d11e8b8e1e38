use ndarray::{s, Array2, Array4};

use crate::audit::AccessAudit;
use crate::data::{pad_and_resize, read_gray_png, read_mask_png, FrameRecord, Manifest};
use crate::error::{Error, Result};

/// A frame preprocessed to the model's square input size.
#[derive(Debug, Clone)]
pub struct Frame {
    pub record: FrameRecord,
    pub image: Array2<f32>,
    pub mask: Option<Array2<bool>>,
}

/// Loads images (and, if `with_masks`, masks) for `records`. Every file read
/// goes through `audit`.
pub fn load_frames(
    manifest: &Manifest,
    records: &[&FrameRecord],
    size: usize,
    with_masks: bool,
    audit: &AccessAudit,
) -> Result<Vec<Frame>> {
    records
        .iter()
        .map(|r| {
            let image = pad_and_resize(&read_gray_png(&manifest.resolve(&r.image_path), audit)?, size)?;
            let mask = if with_masks {
                let rel = r.mask_path.as_ref().ok_or_else(|| {
                    Error::Config(format!("frame {} has no mask", r.image_id()))
                })?;
                let m = read_mask_png(&manifest.resolve(rel), audit)?.mapv(|v| if v { 1.0f32 } else { 0.0 });
                Some(pad_and_resize(&m, size)?.mapv(|v| v >= 0.5))
            } else {
                None
            };
            Ok(Frame {
                record: (*r).clone(),
                image,
                mask,
            })
        })
        .collect()
}

/// Stacks 2-D maps into an `N x 1 x H x W` batch.
pub fn stack<'a>(images: impl ExactSizeIterator<Item = &'a Array2<f32>>) -> Array4<f32> {
    let n = images.len();
    let mut out = None;
    for (i, img) in images.enumerate() {
        let (h, w) = img.dim();
        let o = out.get_or_insert_with(|| Array4::zeros((n, 1, h, w)));
        o.slice_mut(s![i, 0, .., ..]).assign(img);
    }
    out.unwrap_or_else(|| Array4::zeros((0, 1, 0, 0)))
}
