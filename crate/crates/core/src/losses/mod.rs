//! Training objectives.
//!
//! Every loss comes with an analytic gradient with respect to its network
//! output so the training loops can push the upstream gradient straight into
//! the backward pass of the model.

mod contrastive;
mod mim;
mod segmentation;

pub use contrastive::{
    build_temporal_mask, masked_similarity, mt_nxent_loss, mt_nxent_loss_and_grad,
    mt_nxent_raw, similarity_matrix, EmbeddingBatch, MaskedSimilarity,
};
pub use mim::{masked_mae_grad, masked_mae_loss, sample_patch_mask, MaskedBatch, PatchMask};
pub use segmentation::{
    bce_grad, bce_loss, dice_bce_grad, dice_bce_loss, dice_grad, dice_loss, SegPair, BCE_CLAMP,
    DICE_SMOOTH,
};
