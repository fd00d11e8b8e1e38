//! A small reverse-mode engine: each layer returns a cache from `forward`
//! and consumes it in `backward`, accumulating parameter gradients.

pub mod attention;
pub mod layers;
pub mod param;

pub use attention::{MultiHeadAttention, TransformerBlock};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use param::{Init, Param};
