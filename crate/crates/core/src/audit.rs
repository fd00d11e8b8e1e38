//! Records every input file a run opens, so data-isolation contracts can be
//! checked after the fact.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Default)]
pub struct AccessAudit {
    opened: Arc<Mutex<Vec<PathBuf>>>,
}

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, path: &Path) {
        self.opened.lock().expect("audit lock").push(path.to_path_buf());
    }

    /// Paths in the order they were opened (with repeats).
    pub fn opened(&self) -> Vec<PathBuf> {
        self.opened.lock().expect("audit lock").clone()
    }

    /// Sorted, de-duplicated paths.
    pub fn unique(&self) -> Vec<PathBuf> {
        let mut v = self.opened();
        v.sort();
        v.dedup();
        v
    }

    pub fn is_empty(&self) -> bool {
        self.opened.lock().expect("audit lock").is_empty()
    }
}

/// Opened files bucketed by domain and kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AccessSummary {
    pub source_images: usize,
    pub source_masks: usize,
    pub target_images: usize,
    pub target_masks: usize,
    /// Paths not listed in the manifest.
    pub other: usize,
}

impl AccessAudit {
    /// Classifies unique opened paths against the manifest's records.
    pub fn summarize(&self, manifest: &crate::data::Manifest) -> AccessSummary {
        use crate::data::Domain;
        use std::collections::BTreeMap;
        let mut kinds: BTreeMap<PathBuf, (Domain, bool)> = BTreeMap::new();
        for r in &manifest.records {
            kinds.insert(manifest.resolve(&r.image_path), (r.domain, false));
            if let Some(m) = &r.mask_path {
                kinds.insert(manifest.resolve(m), (r.domain, true));
            }
        }
        let mut s = AccessSummary::default();
        for p in self.unique() {
            match kinds.get(&p) {
                Some((Domain::Source, false)) => s.source_images += 1,
                Some((Domain::Source, true)) => s.source_masks += 1,
                Some((Domain::Target, false)) => s.target_images += 1,
                Some((Domain::Target, true)) => s.target_masks += 1,
                None => s.other += 1,
            }
        }
        s
    }

    /// Unique opened paths relative to `root` where possible.
    pub fn relative_to(&self, root: &Path) -> Vec<String> {
        self.unique()
            .into_iter()
            .map(|p| p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned())
            .collect()
    }
}
