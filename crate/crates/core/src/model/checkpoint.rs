//! Single-file checkpoint container:
//!
//! ```text
//! magic "XDSSLCK1" | u64 LE header length | JSON header | f32 LE tensor data | SHA-256 of all preceding bytes
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{tensor_digest, Backbone, Group};
use super::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const MAGIC: &[u8; 8] = b"XDSSLCK1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainMim,
    PretrainContrastive,
    Finetune,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config_digest: String,
    pub rng_seed: u64,
    pub epoch: usize,
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    group: Group,
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<IndexEntry>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Backbone<T>, meta: CheckpointMeta) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, group, p)| {
                let (r, c) = p.value.dim();
                TensorEntry {
                    name,
                    group,
                    shape: [r, c],
                    data: p.value.iter().map(|v| v.to_f32().unwrap()).collect(),
                }
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn group_digest(&self, group: Group) -> String {
        let mut sel: Vec<&TensorEntry> = self.tensors.iter().filter(|t| t.group == group).collect();
        sel.sort_by(|a, b| a.name.cmp(&b.name));
        tensor_digest(sel.into_iter().map(|t| (t.name.as_str(), t.shape, t.data.as_slice())))
    }

    pub fn group_digests(&self) -> BTreeMap<Group, String> {
        Group::ALL.iter().map(|&g| (g, self.group_digest(g))).collect()
    }

    /// Rebuilds the full model recorded in this checkpoint.
    pub fn to_model<T: Scalar>(&self) -> Result<Backbone<T>> {
        let mut model = Backbone::new(self.meta.backbone.clone(), self.meta.rng_seed)?;
        transfer_weights(&mut model, self, &Group::ALL.into_iter().collect(), self.meta.rng_seed)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            index.push(IndexEntry {
                name: t.name.clone(),
                group: t.group,
                shape: t.shape,
                offset: blob.len() as u64,
                len: t.data.len() as u64,
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: index,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + blob.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, reason: &str| Error::Parse {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(parse(0, "bad magic"));
        }
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::Integrity(format!("file truncated at {} bytes", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Integrity("content digest mismatch (corrupt or truncated file)".into()));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if hlen > body.len() - 16 {
            return Err(parse(8, "header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + hlen])
            .map_err(|e| parse(16, &format!("header: {e}")))?;
        let blob = &body[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > blob.len() || e.shape[0] * e.shape[1] != e.len as usize {
                return Err(parse(16 + hlen + start, &format!("tensor `{}` out of range", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(TensorEntry {
                name: e.name,
                group: e.group,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Backbone<T>, meta: CheckpointMeta, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::from_model(model, meta);
    ck.save(path)?;
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: Group,
    pub parameters: usize,
    pub transferred: bool,
    pub digest: String,
    pub checkpoint_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub groups: Vec<GroupReport>,
}

impl TransferReport {
    pub fn group(&self, g: Group) -> &GroupReport {
        self.groups.iter().find(|r| r.group == g).expect("every group reported")
    }
}

/// Copies `groups` from `checkpoint` into `model` and redraws every other
/// group with `reinit_seed`. All requested tensors are validated before the
/// model is touched.
pub fn transfer_weights<T: Scalar>(
    model: &mut Backbone<T>,
    checkpoint: &Checkpoint,
    groups: &BTreeSet<Group>,
    reinit_seed: u64,
) -> Result<TransferReport> {
    let mut staged = Vec::new();
    for (name, group, p) in model.params() {
        if !groups.contains(&group) {
            continue;
        }
        let t = checkpoint.get(&name).ok_or_else(|| Error::Transfer {
            tensor: name.clone(),
            reason: "absent from checkpoint".into(),
        })?;
        let (r, c) = p.value.dim();
        if t.shape != [r, c] || t.group != group {
            return Err(Error::Transfer {
                tensor: name.clone(),
                reason: format!("checkpoint {:?} in {} vs model [{r}, {c}] in {group}", t.shape, t.group),
            });
        }
        let value = Array2::from_shape_vec((r, c), t.data.iter().map(|&v| lit::<T>(v as f64)).collect())
            .expect("shape checked");
        staged.push((name, value));
    }
    let others: Vec<Group> = Group::ALL.into_iter().filter(|g| !groups.contains(g)).collect();
    model.reinitialize(&others, reinit_seed);
    let mut staged = staged.into_iter();
    for (_, group, p) in model.params_mut() {
        if groups.contains(&group) {
            p.value = staged.next().expect("staged in the same order").1;
        }
    }
    let counts = model.group_param_counts();
    let groups = Group::ALL
        .into_iter()
        .map(|g| GroupReport {
            group: g,
            parameters: counts[&g],
            transferred: groups.contains(&g),
            digest: model.group_digest(g),
            checkpoint_digest: checkpoint.group_digest(g),
        })
        .collect();
    Ok(TransferReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: Stage::PretrainMim,
            config_digest: "abc".into(),
            rng_seed: 7,
            epoch: 3,
            backbone: BackboneConfig::tiny(),
        }
    }

    fn model(seed: u64) -> Backbone<f32> {
        Backbone::new(BackboneConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(1);
        let ck = Checkpoint::from_model(&m, meta());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta.stage, Stage::PretrainMim);
        let m2: Backbone<f32> = back.to_model().unwrap();
        for ((_, _, a), (_, _, b)) in m.params().into_iter().zip(m2.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_model(&model(1), meta()).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Integrity(_))
        ));
        let mut flipped = bytes.clone();
        let k = flipped.len() - 100;
        flipped[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(Checkpoint::from_bytes(&[]), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_header_reports_offset() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&4u64.to_le_bytes());
        bytes.extend_from_slice(b"{no}");
        let d = Sha256::digest(&bytes);
        bytes.extend_from_slice(&d);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Parse { offset: 16, .. })));
    }

    #[test]
    fn transfer_contract() {
        let ck = Checkpoint::from_model(&model(1), meta());
        let mut target = model(2);
        let sel: BTreeSet<Group> = [Group::Embedding, Group::Encoder].into();
        let report = transfer_weights(&mut target, &ck, &sel, 99).unwrap();
        for g in Group::ALL {
            let r = report.group(g);
            assert_eq!(r.digest == r.checkpoint_digest, sel.contains(&g), "{g}");
            assert_eq!(r.digest, target.group_digest(g));
        }

        let mut all = model(3);
        transfer_weights(&mut all, &ck, &Group::ALL.into(), 99).unwrap();
        assert_eq!(all.group_digests(), ck.group_digests());

        let mut none = model(1);
        transfer_weights(&mut none, &ck, &BTreeSet::new(), 99).unwrap();
        for g in Group::ALL {
            assert_ne!(none.group_digest(g), ck.group_digest(g));
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut cfg = BackboneConfig::tiny();
        cfg.encoder_dim = 32;
        let other = Backbone::<f32>::new(cfg, 1).unwrap();
        let ck = Checkpoint::from_model(&other, meta());
        let mut target = model(2);
        let before = target.group_digests();
        match transfer_weights(&mut target, &ck, &[Group::Encoder].into(), 5) {
            Err(Error::Transfer { tensor, .. }) => assert!(tensor.starts_with("encoder.")),
            other => panic!("expected transfer error, got {other:?}"),
        }
        assert_eq!(target.group_digests(), before);
    }
}
