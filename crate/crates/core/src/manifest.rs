//! Dataset manifests: a JSON list of clip entries.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffmath::msmt;
use crate::error::{Error, Result};
use crate::evalharness::{cde_relabel, CdeMap};

/// A class index or an emotion name to relabel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks_path: Option<PathBuf>,
    pub subject_id: String,
    pub label: Label,
    pub source: String,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    /// Augmented copies are used for training only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub augmented: bool,
}

impl ManifestEntry {
    /// File stem of the clip path, the clip's identifier.
    pub fn id(&self) -> String {
        let name = self.clip_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match name.find('.') {
            Some(i) if i > 0 => name[..i].to_string(),
            _ => name.to_string(),
        }
    }

    pub fn class_index(&self, classes: usize, map: &CdeMap) -> Result<usize> {
        let c = match &self.label {
            Label::Index(i) => *i,
            Label::Name(n) => cde_relabel(map, n, &self.source)?,
        };
        if c >= classes {
            return Err(Error::Invalid(format!(
                "clip {}: class {c} out of range for {classes} classes",
                self.id()
            )));
        }
        Ok(c)
    }
}

/// Entries plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base: PathBuf) -> Result<Self> {
        let m = Manifest { entries, base };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(entries, base).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Writes the entries atomically as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.entries)?;
        bytes.push(b'\n');
        msmt::write_atomic(path, &bytes)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            let id = e.id();
            if id.is_empty() {
                return Err(Error::Invalid(format!("empty clip path {:?}", e.clip_path)));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::Invalid(format!("duplicate clip id {id}")));
            }
            if !(e.onset <= e.apex && e.apex <= e.offset) {
                return Err(Error::Invalid(format!("clip {id}: need onset <= apex <= offset")));
            }
            if e.subject_id.is_empty() {
                return Err(Error::Invalid(format!("clip {id}: empty subject id")));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, label: Label) -> ManifestEntry {
        ManifestEntry {
            clip_path: path.into(),
            landmarks_path: None,
            subject_id: "s1".into(),
            label,
            source: "casme2".into(),
            onset: 0,
            apex: 3,
            offset: 6,
            fps: None,
            augmented: false,
        }
    }

    #[test]
    fn labels_parse_both_forms() {
        let e: ManifestEntry = serde_json::from_str(
            r#"{"clip_path":"a/x.msmt","subject_id":"s1","label":"happiness","source":"casme2","onset":0,"apex":1,"offset":2}"#,
        )
        .unwrap();
        assert_eq!(e.label, Label::Name("happiness".into()));
        assert_eq!(e.class_index(3, &CdeMap::default()).unwrap(), 1);
        assert_eq!(e.id(), "x");
        let e = entry("b.msmt", Label::Index(2));
        assert_eq!(e.class_index(3, &CdeMap::default()).unwrap(), 2);
        assert!(e.class_index(2, &CdeMap::default()).is_err());
    }

    #[test]
    fn rejects_duplicates_and_bad_indices() {
        let a = entry("d/x.msmt", Label::Index(0));
        assert!(Manifest::new(vec![a.clone(), entry("e/x.msmt", Label::Index(1))], PathBuf::new()).is_err());
        let mut b = a;
        b.apex = 9;
        assert!(Manifest::new(vec![b], PathBuf::new()).is_err());
    }
}
