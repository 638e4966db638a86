//! JSON image manifest: `{"entries":[{"id","label","camera","file","split"}]}`.
//!
//! Relative `file` paths resolve against the manifest's own directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use fisherlda_core::dataset::{DescriptorSet, Split};
use serde::{Deserialize, Serialize};

use crate::descfile;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

impl From<Split> for SplitName {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitName::Train,
            Split::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub label: usize,
    pub camera: u32,
    pub file: String,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    /// Directory that relative `file` paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m: Manifest =
            serde_json::from_str(text).map_err(|e| CliError::format(path, e.to_string()))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CliError::format(path, format!("duplicate image id {:?}", e.id)));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn find(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        let p = Path::new(&entry.file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: SplitName) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(&self, entry: &Entry) -> Result<DescriptorSet> {
        let path = self.resolve(entry);
        let descriptors = descfile::read(&path)?;
        DescriptorSet::new(entry.id.clone(), entry.camera, entry.label, descriptors)
            .map_err(|e| CliError::format(&path, e.to_string()))
    }

    /// Loads every entry of `split`, failing if there are none.
    pub fn load_split(&self, split: SplitName) -> Result<Vec<DescriptorSet>> {
        let entries = self.split(split);
        if entries.is_empty() {
            return Err(CliError::Config(format!("manifest has no {} entries", split.as_str())));
        }
        entries.into_iter().map(|e| self.load(e)).collect()
    }
}
