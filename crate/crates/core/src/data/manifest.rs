use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One frame of one video. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub patient_id: String,
    pub video_id: String,
    pub frame_index: u64,
    pub domain: Domain,
    pub image_path: String,
    pub mask_path: Option<String>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl FrameRecord {
    /// Stable identifier derived from the image file stem.
    pub fn image_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_f{}", self.video_id, self.frame_index))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<FrameRecord>,
    /// Patient id to split.
    pub split_assignment: BTreeMap<String, Split>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<FrameRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut split_assignment = BTreeMap::new();
        for r in &records {
            if let Some(s) = r.split {
                match split_assignment.insert(r.patient_id.clone(), s) {
                    Some(prev) if prev != s => {
                        return Err(Error::Data(format!(
                            "patient {} appears in both {prev} and {s}",
                            r.patient_id
                        )))
                    }
                    _ => {}
                }
            }
        }
        let m = Self {
            records,
            split_assignment,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks the structural invariants: unique frame indices per video and a
    /// single patient per video.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen: BTreeSet<(&str, u64)> = BTreeSet::new();
        for r in &self.records {
            if let Some(p) = owner.insert(&r.video_id, &r.patient_id) {
                if p != r.patient_id {
                    return Err(Error::Data(format!(
                        "video {} belongs to patients {p} and {}",
                        r.video_id, r.patient_id
                    )));
                }
            }
            if !seen.insert((&r.video_id, r.frame_index)) {
                return Err(Error::Data(format!(
                    "duplicate frame {} in video {}",
                    r.frame_index, r.video_id
                )));
            }
            if let (Some(s), Some(a)) = (r.split, self.split_assignment.get(&r.patient_id)) {
                if s != *a {
                    return Err(Error::Data(format!(
                        "frame of patient {} marked {s}, patient assigned {a}",
                        r.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_of(&self, record: &FrameRecord) -> Option<Split> {
        self.split_assignment.get(&record.patient_id).copied()
    }

    pub fn patients(&self, domain: Domain) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.domain == domain)
            .map(|r| r.patient_id.clone())
            .collect()
    }

    /// Records of a domain assigned to any of `splits`, in manifest order.
    pub fn select(&self, domain: Domain, splits: &[Split]) -> Vec<&FrameRecord> {
        self.records
            .iter()
            .filter(|r| r.domain == domain)
            .filter(|r| self.split_of(r).is_some_and(|s| splits.contains(&s)))
            .collect()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Records with the split column filled from `split_assignment`.
    pub fn materialized_records(&self) -> Vec<FrameRecord> {
        self.records
            .iter()
            .map(|r| FrameRecord {
                split: self.split_of(r),
                ..r.clone()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.materialized_records())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<FrameRecord> = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("manifest {}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, v: &str, f: u64, split: Option<Split>) -> FrameRecord {
        FrameRecord {
            patient_id: p.into(),
            video_id: v.into(),
            frame_index: f,
            domain: Domain::Source,
            image_path: format!("img/{v}_{f}.png"),
            mask_path: None,
            split,
        }
    }

    #[test]
    fn rejects_duplicate_frames_and_shared_videos() {
        assert!(Manifest::new(vec![rec("a", "v", 0, None), rec("a", "v", 0, None)], ".").is_err());
        assert!(Manifest::new(vec![rec("a", "v", 0, None), rec("b", "v", 1, None)], ".").is_err());
        assert!(Manifest::new(
            vec![rec("a", "v", 0, Some(Split::Train)), rec("a", "v", 1, Some(Split::Test))],
            "."
        )
        .is_err());
    }

    #[test]
    fn json_round_trip_keeps_null_masks() {
        let m = Manifest::new(vec![rec("a", "v", 0, Some(Split::Val))], "/tmp").unwrap();
        let json = m.to_json().unwrap();
        assert!(json.contains("\"mask_path\": null"));
        assert!(json.contains("\"split\": \"val\""));
        let back: Vec<FrameRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m.records);
    }

    #[test]
    fn image_id_is_file_stem() {
        assert_eq!(rec("a", "v", 3, None).image_id(), "v_3");
    }
}
