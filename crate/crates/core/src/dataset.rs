//! JSON dataset manifest: which files make up each patch and which split it belongs to.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_aerial_png, load_dem, PatchTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// File names are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub hr: String,
    pub lr: String,
    pub dem_ilr: String,
    pub aerial: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: SplitCounts,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(seed: u64, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut m = Self {
            seed,
            counts: SplitCounts::default(),
            entries,
            root: PathBuf::new(),
        };
        m.counts = m.recount();
        m.validate()?;
        Ok(m)
    }

    fn recount(&self) -> SplitCounts {
        let n = |s| self.entries.iter().filter(|e| e.split == s).count();
        SplitCounts {
            train: n(Split::Train),
            val: n(Split::Val),
            test: n(Split::Test),
        }
    }

    /// Patch ids are unique, so no id can sit in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format(format!("patch id {} listed twice", e.id)));
            }
        }
        if self.counts != self.recount() {
            return Err(Error::Format("split counts disagree with entries".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Directory that entry file names resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_triple(&self, entry: &ManifestEntry, norm_scale: f64) -> Result<PatchTriple> {
        let hr = load_dem(self.root.join(&entry.hr))?;
        let ilr = load_dem(self.root.join(&entry.dem_ilr))?;
        let aerial = load_aerial_png(self.root.join(&entry.aerial))?;
        PatchTriple::new(hr, ilr, aerial, norm_scale)
    }

    pub fn load_split(&self, split: Split, norm_scale: f64) -> Result<Vec<(String, PatchTriple)>> {
        self.split(split)
            .map(|e| Ok((e.id.clone(), self.load_triple(e, norm_scale)?)))
            .collect()
    }
}
