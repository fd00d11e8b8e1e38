//! Convolutional stem + transformer encoder + upsampling decoder, with
//! separate segmentation and reconstruction heads and a projection head
//! for contrastive embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, BackboneConfig, PROJECTION_DIM};
use crate::error::{Error, Result};
use crate::nn::attention::BlockCache;
use crate::nn::layers::{relu, relu_backward, upsample2x, upsample2x_backward, ConvCache, NormCache};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Param, TransformerBlock};
use crate::scalar::{lit, Scalar};

/// Disjoint parameter partition used for transfer and digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Encoder,
    Decoder,
    Head,
    Projection,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Embedding,
        Group::Encoder,
        Group::Decoder,
        Group::Head,
        Group::Projection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Head => "head",
            Group::Projection => "projection",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    pub stem: Vec<Conv2d<T>>,
    pub patch: Conv2d<T>,
    /// Learned positional embedding, `tokens x dim`.
    pub pos: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
    pub bridge: Conv2d<T>,
    pub stages: Vec<Conv2d<T>>,
    pub seg_head: Conv2d<T>,
    pub recon_head: Conv2d<T>,
    pub proj1: Linear<T>,
    pub proj2: Linear<T>,
}

/// Which single-conv head maps decoder features to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelHead {
    Segment,
    Reconstruct,
}

pub struct TrunkCache<T: Scalar> {
    stem: Vec<ConvCache<T>>,
    stem_out: Vec<Array4<T>>,
    patch: ConvCache<T>,
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    batch: usize,
}

struct DecoderCache<T: Scalar> {
    bridge: ConvCache<T>,
    bridge_out: Array4<T>,
    stages: Vec<(ConvCache<T>, Array4<T>)>,
}

/// Everything `pixel_backward` needs from a pixel-head forward pass.
pub struct PixelCache<T: Scalar> {
    head: PixelHead,
    trunk: TrunkCache<T>,
    decoder: DecoderCache<T>,
    head_cache: ConvCache<T>,
}

pub struct EmbedCache<T: Scalar> {
    trunk: TrunkCache<T>,
    pooled: Array2<T>,
    hidden: Array2<T>,
    z: Array2<T>,
    norms: Vec<T>,
}

fn to_nhwc<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
}

fn to_nchw<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.view().permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

impl<T: Scalar> Backbone<T> {
    /// Builds and initializes a model; parameters depend only on
    /// `(config, seed)`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut stem = Vec::new();
        let mut ch = c.in_channels;
        for &w in &c.embed_channels {
            stem.push(Conv2d::new(ch, w, 3, 2, 1));
            ch = w;
        }
        let d = c.encoder_dim;
        let patch = Conv2d::new(ch, d, c.token_patch, c.token_patch, 0);
        let blocks = (0..c.encoder_depth)
            .map(|_| TransformerBlock::new(d, c.encoder_heads, c.mlp_ratio))
            .collect();
        let bridge = Conv2d::new(d, c.bridge_channels, 3, 1, 1);
        let mut stages = Vec::new();
        let mut prev = c.bridge_channels;
        for (j, &w) in c.decoder_channels.iter().enumerate() {
            let skip = c.skip_for_stage(j).map_or(0, |i| c.embed_channels[i]);
            stages.push(Conv2d::new(prev + skip, w, 3, 1, 1));
            prev = w;
        }
        let mut model = Self {
            stem,
            patch,
            pos: Param::new((c.tokens(), d), Init::Normal { std: 0.02 }),
            blocks,
            norm: LayerNorm::new(d),
            bridge,
            stages,
            seg_head: Conv2d::new(prev, 1, 3, 1, 1),
            recon_head: Conv2d::new(prev, c.in_channels, 3, 1, 1),
            proj1: Linear::new(d, d, Init::HeNormal { fan_in: d }),
            proj2: Linear::new(d, PROJECTION_DIM, Init::XavierUniform { fan_in: d, fan_out: PROJECTION_DIM }),
            config,
        };
        model.reinitialize(&Group::ALL, seed);
        Ok(model)
    }

    /// Every parameter with its fully qualified name and group, in a fixed
    /// order.
    pub fn params(&self) -> Vec<(String, Group, &Param<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.stem.iter().enumerate() {
            for (n, p) in conv.params() {
                out.push((format!("embedding.stem.{i}.{n}"), Group::Embedding, p));
            }
        }
        for (n, p) in self.patch.params() {
            out.push((format!("embedding.patch.{n}"), Group::Embedding, p));
        }
        out.push(("embedding.pos".to_string(), Group::Embedding, &self.pos));
        for (i, block) in self.blocks.iter().enumerate() {
            for (n, p) in block.params() {
                out.push((format!("encoder.block.{i}.{n}"), Group::Encoder, p));
            }
        }
        for (n, p) in self.norm.params() {
            out.push((format!("encoder.norm.{n}"), Group::Encoder, p));
        }
        for (n, p) in self.bridge.params() {
            out.push((format!("decoder.bridge.{n}"), Group::Decoder, p));
        }
        for (j, conv) in self.stages.iter().enumerate() {
            for (n, p) in conv.params() {
                out.push((format!("decoder.stage.{j}.{n}"), Group::Decoder, p));
            }
        }
        for (n, p) in self.seg_head.params() {
            out.push((format!("head.seg.{n}"), Group::Head, p));
        }
        for (n, p) in self.recon_head.params() {
            out.push((format!("head.recon.{n}"), Group::Head, p));
        }
        for (n, p) in self.proj1.params() {
            out.push((format!("projection.fc1.{n}"), Group::Projection, p));
        }
        for (n, p) in self.proj2.params() {
            out.push((format!("projection.fc2.{n}"), Group::Projection, p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, Group, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.stem.iter_mut().enumerate() {
            for (n, p) in conv.params_mut() {
                out.push((format!("embedding.stem.{i}.{n}"), Group::Embedding, p));
            }
        }
        for (n, p) in self.patch.params_mut() {
            out.push((format!("embedding.patch.{n}"), Group::Embedding, p));
        }
        out.push(("embedding.pos".to_string(), Group::Embedding, &mut self.pos));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (n, p) in block.params_mut() {
                out.push((format!("encoder.block.{i}.{n}"), Group::Encoder, p));
            }
        }
        for (n, p) in self.norm.params_mut() {
            out.push((format!("encoder.norm.{n}"), Group::Encoder, p));
        }
        for (n, p) in self.bridge.params_mut() {
            out.push((format!("decoder.bridge.{n}"), Group::Decoder, p));
        }
        for (j, conv) in self.stages.iter_mut().enumerate() {
            for (n, p) in conv.params_mut() {
                out.push((format!("decoder.stage.{j}.{n}"), Group::Decoder, p));
            }
        }
        for (n, p) in self.seg_head.params_mut() {
            out.push((format!("head.seg.{n}"), Group::Head, p));
        }
        for (n, p) in self.recon_head.params_mut() {
            out.push((format!("head.recon.{n}"), Group::Head, p));
        }
        for (n, p) in self.proj1.params_mut() {
            out.push((format!("projection.fc1.{n}"), Group::Projection, p));
        }
        for (n, p) in self.proj2.params_mut() {
            out.push((format!("projection.fc2.{n}"), Group::Projection, p));
        }
        out
    }

    /// Redraws every parameter of `groups` from its init distribution.
    pub fn reinitialize(&mut self, groups: &[Group], seed: u64) {
        for (name, group, p) in self.params_mut() {
            if groups.contains(&group) {
                p.initialize(seed, &name);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, _, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    pub fn group_param_counts(&self) -> BTreeMap<Group, usize> {
        let mut out: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
        for (_, g, p) in self.params() {
            *out.get_mut(&g).unwrap() += p.len();
        }
        out
    }

    /// Content digest of one group; comparable with [`Checkpoint::group_digest`](super::Checkpoint::group_digest).
    pub fn group_digest(&self, group: Group) -> String {
        let mut tensors: Vec<(String, [usize; 2], Vec<f32>)> = self
            .params()
            .into_iter()
            .filter(|(_, g, _)| *g == group)
            .map(|(n, _, p)| {
                let (r, c) = p.value.dim();
                (n, [r, c], p.value.iter().map(|v| v.to_f32().unwrap()).collect())
            })
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        tensor_digest(tensors.iter().map(|(n, s, d)| (n.as_str(), *s, d.as_slice())))
    }

    pub fn group_digests(&self) -> BTreeMap<Group, String> {
        Group::ALL.iter().map(|&g| (g, self.group_digest(g))).collect()
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let c = &self.config;
        let (n, ch, h, w) = x.dim();
        if n == 0 || ch != c.in_channels || h != c.image_size || w != c.image_size {
            return Err(Error::InvalidInput(format!(
                "expected N x {} x {} x {} input, got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                x.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn trunk(&self, x: &Array4<T>) -> (Array2<T>, TrunkCache<T>) {
        let n = x.dim().0;
        let mut h = to_nhwc(x);
        let mut stem = Vec::with_capacity(self.stem.len());
        let mut stem_out = Vec::with_capacity(self.stem.len());
        for conv in &self.stem {
            let (y, cache) = conv.forward(&h);
            h = relu(&y);
            stem.push(cache);
            stem_out.push(h.clone());
        }
        let (p, patch) = self.patch.forward(&h);
        let (l, d) = self.pos.value.dim();
        let mut tokens = p.into_shape_with_order((n * l, d)).expect("token layout");
        for b in 0..n {
            let mut rows = tokens.slice_mut(s![b * l..(b + 1) * l, ..]);
            rows += &self.pos.value;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(tokens.view(), l);
            tokens = y;
            blocks.push(cache);
        }
        let (out, norm) = self.norm.forward(tokens.view());
        (
            out,
            TrunkCache {
                stem,
                stem_out,
                patch,
                blocks,
                norm,
                batch: n,
            },
        )
    }

    fn trunk_backward(&mut self, cache: &TrunkCache<T>, dtokens: &Array2<T>, mut dskips: Vec<Option<Array4<T>>>) {
        let mut d = self.norm.backward(&cache.norm, dtokens.view());
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(c, d.view());
        }
        let (l, dim) = self.pos.value.dim();
        let g = self.config.grid();
        for b in 0..cache.batch {
            self.pos.grad += &d.slice(s![b * l..(b + 1) * l, ..]);
        }
        let dp = d
            .into_shape_with_order((cache.batch, g, g, dim))
            .expect("token layout");
        let mut dh = self.patch.backward(&cache.patch, &dp);
        for i in (0..self.stem.len()).rev() {
            if let Some(ds) = dskips.get_mut(i).and_then(Option::take) {
                dh += &ds;
            }
            dh = relu_backward(&cache.stem_out[i], &dh);
            if i > 0 {
                dh = self.stem[i].backward(&cache.stem[i], &dh);
            } else {
                // The input gradient is not needed; only accumulate weights.
                self.stem[0].backward(&cache.stem[0], &dh);
            }
        }
    }

    fn decode(&self, tokens: &Array2<T>, trunk: &TrunkCache<T>) -> (Array4<T>, DecoderCache<T>) {
        let g = self.config.grid();
        let x = tokens
            .clone()
            .into_shape_with_order((trunk.batch, g, g, self.config.encoder_dim))
            .expect("token layout");
        let (y, bridge) = self.bridge.forward(&x);
        let mut h = relu(&y);
        let bridge_out = h.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for (j, conv) in self.stages.iter().enumerate() {
            let mut up = upsample2x(&h);
            if let Some(i) = self.config.skip_for_stage(j) {
                up = concatenate(Axis(3), &[up.view(), trunk.stem_out[i].view()]).expect("matching skip size");
            }
            let (y, cache) = conv.forward(&up);
            h = relu(&y);
            stages.push((cache, h.clone()));
        }
        (
            h,
            DecoderCache {
                bridge,
                bridge_out,
                stages,
            },
        )
    }

    fn decode_backward(&mut self, cache: &DecoderCache<T>, dy: Array4<T>) -> (Array2<T>, Vec<Option<Array4<T>>>) {
        let mut dskips: Vec<Option<Array4<T>>> = vec![None; self.stem.len()];
        let mut d = dy;
        for j in (0..self.stages.len()).rev() {
            let (conv_cache, out) = &cache.stages[j];
            d = relu_backward(out, &d);
            d = self.stages[j].backward(conv_cache, &d);
            if let Some(i) = self.config.skip_for_stage(j) {
                let prev = self.stages[j].in_channels - self.config.embed_channels[i];
                dskips[i] = Some(d.slice(s![.., .., .., prev..]).to_owned());
                d = d.slice(s![.., .., .., ..prev]).to_owned();
            }
            d = upsample2x_backward(&d);
        }
        d = relu_backward(&cache.bridge_out, &d);
        let d = self.bridge.backward(&cache.bridge, &d);
        let (n, g, _, dim) = d.dim();
        let dtokens = d.into_shape_with_order((n * g * g, dim)).expect("token layout");
        (dtokens, dskips)
    }

    /// Pixel-head forward keeping everything needed for backward.
    pub fn pixel_forward(&self, x: &Array4<T>, head: PixelHead) -> Result<(Array4<T>, PixelCache<T>)> {
        self.check_input(x)?;
        let (tokens, trunk) = self.trunk(x);
        let (features, decoder) = self.decode(&tokens, &trunk);
        let conv = match head {
            PixelHead::Segment => &self.seg_head,
            PixelHead::Reconstruct => &self.recon_head,
        };
        let (y, head_cache) = conv.forward(&features);
        Ok((
            to_nchw(&y),
            PixelCache {
                head,
                trunk,
                decoder,
                head_cache,
            },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d output` (NCHW).
    pub fn pixel_backward(&mut self, cache: &PixelCache<T>, dout: &Array4<T>) {
        let dy = to_nhwc(dout);
        let conv = match cache.head {
            PixelHead::Segment => &mut self.seg_head,
            PixelHead::Reconstruct => &mut self.recon_head,
        };
        let dfeat = conv.backward(&cache.head_cache, &dy);
        let (dtokens, dskips) = self.decode_backward(&cache.decoder, dfeat);
        self.trunk_backward(&cache.trunk, &dtokens, dskips);
    }

    /// Per-pixel segmentation logits, `N x 1 x S x S`.
    pub fn forward_segment(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.pixel_forward(x, PixelHead::Segment)?.0)
    }

    /// Reconstructed image, same shape as the input.
    pub fn forward_reconstruct(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.pixel_forward(x, PixelHead::Reconstruct)?.0)
    }

    /// Unit-norm projections of mean-pooled encoder tokens, `N x 128`.
    pub fn embed_forward(&self, x: &Array4<T>) -> Result<(Array2<T>, EmbedCache<T>)> {
        self.check_input(x)?;
        let (tokens, trunk) = self.trunk(x);
        let l = self.config.tokens();
        let n = trunk.batch;
        let pooled = tokens
            .view()
            .into_shape_with_order((n, l, self.config.encoder_dim))
            .expect("token layout")
            .mean_axis(Axis(1))
            .expect("non-empty token set");
        let hidden = relu(&self.proj1.forward(pooled.view()));
        let mut z = self.proj2.forward(hidden.view());
        let tiny = lit::<T>(1e-12);
        let mut norms = Vec::with_capacity(n);
        for mut row in z.outer_iter_mut() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        Ok((
            z.clone(),
            EmbedCache {
                trunk,
                pooled,
                hidden,
                z,
                norms,
            },
        ))
    }

    pub fn forward_embed(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.embed_forward(x)?.0)
    }

    pub fn embed_backward(&mut self, cache: &EmbedCache<T>, dz: &Array2<T>) {
        let mut de = dz.clone();
        for (b, mut row) in de.outer_iter_mut().enumerate() {
            let z = cache.z.row(b);
            let dot = z.dot(&row);
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - z[k] * dot) / cache.norms[b];
            }
        }
        let dhidden = self.proj2.backward(cache.hidden.view(), de.view());
        let dhidden = relu_backward(&cache.hidden, &dhidden);
        let dpooled = self.proj1.backward(cache.pooled.view(), dhidden.view());
        let l = self.config.tokens();
        let scale = lit::<T>(1.0 / l as f64);
        let n = cache.trunk.batch;
        let mut dtokens = Array2::zeros((n * l, self.config.encoder_dim));
        for b in 0..n {
            let row = dpooled.row(b).mapv(|v| v * scale);
            dtokens.slice_mut(s![b * l..(b + 1) * l, ..]).assign(&row.broadcast((l, row.len())).unwrap());
        }
        self.trunk_backward(&cache.trunk, &dtokens, Vec::new());
    }
}

/// SHA-256 over `(name, 0x00, rows, cols, f32 LE values)` for each tensor in
/// the given order.
pub fn tensor_digest<'a>(tensors: impl Iterator<Item = (&'a str, [usize; 2], &'a [f32])>) -> String {
    let mut h = Sha256::new();
    for (name, shape, data) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for s in shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            in_channels: 1,
            embed_channels: vec![3, 4],
            token_patch: 2,
            encoder_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            mlp_ratio: 2,
            bridge_channels: 6,
            decoder_channels: vec![5, 4, 3],
        }
    }

    fn input(n: usize, size: usize, seed: f64) -> Array4<f64> {
        Array4::from_shape_fn((n, 1, size, size), |(b, _, y, x)| {
            (0.5 + 0.5 * ((b * 131 + y * 17 + x * 7) as f64 * 0.173 + seed).sin()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn shapes_and_partition() {
        let m = Backbone::<f32>::new(BackboneConfig::tiny(), 1).unwrap();
        let x = Array4::<f32>::zeros((2, 1, 64, 64));
        let y = m.forward_segment(&x).unwrap();
        assert_eq!(y.dim(), (2, 1, 64, 64));
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(m.forward_reconstruct(&x).unwrap().dim(), (2, 1, 64, 64));
        let z = m.forward_embed(&x).unwrap();
        assert_eq!(z.dim(), (2, PROJECTION_DIM));
        let counts = m.group_param_counts();
        assert_eq!(counts.values().sum::<usize>(), m.num_params());
        assert!(counts.values().all(|&c| c > 0));
        assert!(m.forward_segment(&Array4::zeros((1, 1, 32, 32))).is_err());
    }

    #[test]
    fn unique_names() {
        let m = Backbone::<f32>::new(BackboneConfig::tiny(), 1).unwrap();
        let names: std::collections::BTreeSet<_> = m.params().into_iter().map(|(n, g, _)| {
            assert!(n.starts_with(g.as_str()));
            n
        }).collect();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Backbone::<f32>::new(BackboneConfig::tiny(), 5).unwrap();
        let b = Backbone::<f32>::new(BackboneConfig::tiny(), 5).unwrap();
        let c = Backbone::<f32>::new(BackboneConfig::tiny(), 6).unwrap();
        assert_eq!(a.group_digests(), b.group_digests());
        for g in Group::ALL {
            assert_ne!(a.group_digest(g), c.group_digest(g));
        }
    }

    #[test]
    fn batched_forward_matches_single() {
        let m = Backbone::<f32>::new(BackboneConfig::tiny(), 2).unwrap();
        let x = input(3, 64, 0.3).mapv(|v| v as f32);
        let all = m.forward_segment(&x).unwrap();
        for b in 0..3 {
            let one = m.forward_segment(&x.slice(s![b..b + 1, .., .., ..]).to_owned()).unwrap();
            for (p, q) in one.iter().zip(all.slice(s![b, .., .., ..]).iter()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
        assert_eq!(m.forward_segment(&x).unwrap(), all);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = Backbone::<f32>::new(BackboneConfig::tiny(), 3).unwrap();
        let x = input(4, 64, 1.1).mapv(|v| v as f32);
        let z = m.forward_embed(&x).unwrap();
        for row in z.outer_iter() {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let cos: f32 = z.row(0).dot(&z.row(1));
        assert!(cos < 1.0 - 1e-6);
    }

    /// Loss = <probe, output>; compares analytic gradients for a sample of
    /// parameters in every group against central differences.
    fn check_gradients(head: Option<PixelHead>) {
        let mut m = Backbone::<f64>::new(small(), 9).unwrap();
        // Zero biases put dead patches exactly on the rectifier kink.
        for (k, (_, _, p)) in m.params_mut().into_iter().enumerate() {
            if matches!(p.init, Init::Zeros | Init::Ones) {
                let mut i = 0.0;
                p.value.mapv_inplace(|v| {
                    i += 1.0;
                    v + 0.05 * (k as f64 + 0.3 * i).sin()
                });
            }
        }
        let x = input(2, 16, 0.7);
        let probe_pix = input(2, 16, 2.9).mapv(|v| v - 0.5);
        let probe_emb = Array2::from_shape_fn((2, PROJECTION_DIM), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let loss = |m: &Backbone<f64>| match head {
            Some(h) => (&m.pixel_forward(&x, h).unwrap().0 * &probe_pix).sum(),
            None => (&m.forward_embed(&x).unwrap() * &probe_emb).sum(),
        };
        m.zero_grad();
        match head {
            Some(h) => {
                let (_, cache) = m.pixel_forward(&x, h).unwrap();
                m.pixel_backward(&cache, &probe_pix);
            }
            None => {
                let (_, cache) = m.embed_forward(&x).unwrap();
                m.embed_backward(&cache, &probe_emb);
            }
        }
        let names: Vec<(String, Group, (usize, usize))> =
            m.params().into_iter().map(|(n, g, p)| (n, g, p.value.dim())).collect();
        let eps = 1e-5;
        let mut checked = 0;
        for (k, (name, group, (r, c))) in names.iter().enumerate() {
            let idx = ((k * 7) % r, (k * 3) % c);
            let analytic = m.params().into_iter().find(|(n, _, _)| n == name).unwrap().2.grad[idx];
            let bump = |delta: f64| {
                let mut mm = m.clone();
                for (n, _, p) in mm.params_mut() {
                    if &n == name {
                        p.value[idx] += delta;
                    }
                }
                loss(&mm)
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let unused = match head {
                Some(PixelHead::Segment) => *group == Group::Projection || name.starts_with("head.recon"),
                Some(PixelHead::Reconstruct) => *group == Group::Projection || name.starts_with("head.seg"),
                None => matches!(group, Group::Decoder | Group::Head),
            };
            if unused {
                assert_eq!(analytic, 0.0, "{name}");
                assert!(fd.abs() < 1e-9, "{name}");
                continue;
            }
            let tol = 1e-6 * (1.0 + fd.abs().max(analytic.abs()));
            assert!((fd - analytic).abs() < tol, "{name}{idx:?}: fd {fd} analytic {analytic}");
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn segment_gradients() {
        check_gradients(Some(PixelHead::Segment));
    }

    #[test]
    fn reconstruct_gradients() {
        check_gradients(Some(PixelHead::Reconstruct));
    }

    #[test]
    fn embed_gradients() {
        check_gradients(None);
    }
}
