use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::records::{count_classes, Counts};
use super::transform::TransformLog;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test1,
    Test2,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test1, Split::Test2];

    pub fn is_test(self) -> bool {
        matches!(self, Split::Test1 | Split::Test2)
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test1" => Ok(Self::Test1),
            "test2" => Ok(Self::Test2),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test1 => "test1",
            Self::Test2 => "test2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub class: String,
    pub split: Split,
    /// Source image for augmented records, `None` for originals.
    pub parent_id: Option<String>,
    /// Relative to the manifest directory.
    pub image_path: String,
    pub transform_log: Option<TransformLog>,
}

impl ManifestRecord {
    /// Augmentation family: the parent for augmented records, else itself.
    pub fn family(&self) -> &str {
        self.parent_id.as_deref().unwrap_or(&self.image_id)
    }
}

/// Curated dataset description. An original used by both test sets appears
/// once per split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Sorted by split, class, then id.
    pub fn new(mut records: Vec<ManifestRecord>) -> Self {
        records.sort_by(|a, b| (a.split, &a.class, &a.image_id).cmp(&(b.split, &b.class, &b.image_id)));
        Self { records }
    }

    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.class.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn counts(&self, split: Split) -> Counts {
        count_classes(self.split(split).map(|r| r.class.as_str()))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Checks parent links, duplicate entries, test disjointness and, when
    /// `leakage_safe`, that no family spans two of {train, val, test}.
    pub fn check(&self, leakage_safe: bool) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut originals: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.records {
            if !seen.insert((r.split, r.image_id.as_str())) {
                return Err(Error::Data(format!("{} listed twice in {}", r.image_id, r.split)));
            }
            if r.parent_id.is_none() {
                originals.insert(&r.image_id, &r.class);
            }
        }
        for r in &self.records {
            if let Some(p) = &r.parent_id {
                match originals.get(p.as_str()) {
                    None => return Err(Error::Data(format!("{} has unknown parent {p}", r.image_id))),
                    Some(c) if *c != r.class => {
                        return Err(Error::Data(format!(
                            "{} is {} but its parent is {c}",
                            r.image_id, r.class
                        )))
                    }
                    _ => {}
                }
            }
        }
        let side = |s: Split| if s.is_test() { 2 } else { s as u8 };
        let mut id_side: BTreeMap<&str, u8> = BTreeMap::new();
        for r in &self.records {
            if *id_side.entry(&r.image_id).or_insert(side(r.split)) != side(r.split) {
                return Err(Error::Data(format!("{} appears on both sides of a split", r.image_id)));
            }
        }
        if leakage_safe {
            let mut fam_side: BTreeMap<&str, u8> = BTreeMap::new();
            for r in &self.records {
                if *fam_side.entry(r.family()).or_insert(side(r.split)) != side(r.split) {
                    return Err(Error::Data(format!("family {} spans splits", r.family())));
                }
            }
        }
        Ok(())
    }
}
