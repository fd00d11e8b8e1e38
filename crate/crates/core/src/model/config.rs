use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Output width of the projection head.
pub const PROJECTION_DIM: usize = 128;

/// Shape of the segmentation backbone.
///
/// The stem halves resolution once per entry of `embed_channels`, the token
/// convolution divides by `token_patch`, and each decoder stage doubles it
/// again. Stem outputs whose resolution matches a decoder stage are
/// concatenated as skips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub embed_channels: Vec<usize>,
    pub token_patch: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    #[serde(default = "two")]
    pub mlp_ratio: usize,
    /// Width of the convolution that reshapes encoder tokens for the decoder.
    pub bridge_channels: usize,
    pub decoder_channels: Vec<usize>,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneConfig {
    /// Smallest preset; 8x8 tokens at 64 px. Used by `reproduce`.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            embed_channels: vec![16, 32],
            token_patch: 2,
            encoder_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            mlp_ratio: 2,
            bridge_channels: 64,
            decoder_channels: vec![32, 16, 8],
        }
    }

    /// 16x16 tokens of width 128 at 64 px.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            embed_channels: vec![32, 64],
            token_patch: 1,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            mlp_ratio: 4,
            bridge_channels: 128,
            decoder_channels: vec![64, 32],
        }
    }

    /// ViT-B sized encoder on 224 px input (14x14 tokens).
    pub fn full() -> Self {
        Self {
            image_size: 224,
            in_channels: 1,
            embed_channels: vec![64, 128, 256, 512],
            token_patch: 1,
            encoder_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            mlp_ratio: 4,
            bridge_channels: 512,
            decoder_channels: vec![256, 128, 64, 16],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn downsampling(&self) -> usize {
        (1usize << self.embed_channels.len()) * self.token_patch
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.downsampling()
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Stem index whose output feeds decoder stage `j`, if any.
    pub fn skip_for_stage(&self, j: usize) -> Option<usize> {
        let res = self.grid() << (j + 1);
        (0..self.embed_channels.len()).find(|&i| self.image_size >> (i + 1) == res)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.in_channels == 0 || self.token_patch == 0 {
            return bad("image_size, in_channels and token_patch must be positive".into());
        }
        if self.embed_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0)
            || self.bridge_channels == 0
            || self.mlp_ratio == 0
        {
            return bad("channel widths must be positive".into());
        }
        if self.image_size % self.downsampling() != 0 {
            return bad(format!(
                "image_size {} not divisible by total downsampling {}",
                self.image_size,
                self.downsampling()
            ));
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return bad(format!(
                "encoder_dim {} not divisible by encoder_heads {}",
                self.encoder_dim, self.encoder_heads
            ));
        }
        if self.decoder_channels.is_empty()
            || self.grid() << self.decoder_channels.len() != self.image_size
        {
            return bad(format!(
                "{} decoder stage(s) from a {}x{} grid do not reach {} px",
                self.decoder_channels.len(),
                self.grid(),
                self.grid(),
                self.image_size
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
