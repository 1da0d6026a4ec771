//! Dataset manifest: a TOML document naming the dimensions, classes, text
//! bank and the bag files of each split together with their labels.
//!
//! ```toml
//! d = 64
//! C = 3
//! t = 4
//! task_mode = "multilabel"
//! class_names = ["class0", "class1", "class2"]
//! text_bank = "text_bank.empt"
//!
//! [[splits.train]]
//! patient_id = "p0000"
//! path = "bags/p0000.empd"
//! label = [1, 0, 1]
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::bag::{read_bag_with_dim, PatchBag};
use crate::data::text_bank::{load_text_bank, TextBank};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Multilabel,
    Multiclass,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Multilabel => "multilabel",
            TaskMode::Multiclass => "multiclass",
        })
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel" => Ok(TaskMode::Multilabel),
            "multiclass" => Ok(TaskMode::Multiclass),
            other => Err(Error::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownVariant(format!("split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagEntry {
    pub patient_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<BagEntry>,
    #[serde(default)]
    pub val: Vec<BagEntry>,
    #[serde(default)]
    pub test: Vec<BagEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub t: usize,
    pub task_mode: TaskMode,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_bank: Option<String>,
    pub splits: Splits,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Manifest(format!("C must be at least 2, got {}", self.classes)));
        }
        if self.d == 0 {
            return Err(Error::Manifest("d must be positive".into()));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::Manifest(format!(
                "{} class names for C = {}",
                self.class_names.len(),
                self.classes
            )));
        }
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for entry in self.entries(split) {
                if !seen.insert(entry.patient_id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "patient {} appears more than once across splits",
                        entry.patient_id
                    )));
                }
                if entry.label.len() != self.classes {
                    return Err(Error::Manifest(format!(
                        "patient {}: label length {} for C = {}",
                        entry.patient_id,
                        entry.label.len(),
                        self.classes
                    )));
                }
                if entry.label.iter().any(|&v| v > 1) {
                    return Err(Error::Manifest(format!("patient {}: labels must be 0/1", entry.patient_id)));
                }
                if self.task_mode == TaskMode::Multiclass && entry.label.iter().filter(|&&v| v == 1).count() != 1 {
                    return Err(Error::Manifest(format!(
                        "patient {}: multiclass labels need exactly one positive",
                        entry.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self, split: Split) -> &[BagEntry] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every bag of `split`, checks d and attaches labels.
    pub fn load_split(&self, split: Split) -> Result<Vec<PatchBag>> {
        self.entries(split)
            .par_iter()
            .map(|entry| {
                let mut bag = read_bag_with_dim(self.resolve(&entry.path), self.d)?;
                bag.patient_id = entry.patient_id.clone();
                bag.label = entry.label.iter().map(|&v| f64::from(v)).collect();
                Ok(bag)
            })
            .collect()
    }

    pub fn load_text_bank(&self, seed: u64) -> Result<TextBank> {
        let rel = self
            .text_bank
            .as_deref()
            .ok_or_else(|| Error::Manifest("no text_bank entry".into()))?;
        let bank = load_text_bank(self.resolve(rel), self.classes, self.t, seed)?;
        if bank.dim() != self.d {
            return Err(Error::DimMismatch {
                what: "text bank d vs manifest d",
                expected: self.d,
                found: bank.dim(),
            });
        }
        Ok(bank)
    }
}
