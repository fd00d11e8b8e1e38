//! Frame manifests, patient-level splitting, preprocessing, augmentation and
//! the synthetic phantom.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod phantom;
pub mod raster;
pub mod split;

pub use augment::{augment_frame, augment_pair, AugmentationConfig, AugmentedView};
pub use image::{pad_and_resize, pad_to_square, read_gray_png, read_mask_png, resize_bilinear};
pub use manifest::{Domain, FrameRecord, Manifest, Split};
pub use phantom::{generate_phantom, DomainProfile, PhantomConfig};
pub use split::patient_split;
