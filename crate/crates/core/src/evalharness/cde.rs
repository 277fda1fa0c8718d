//! Relabeling of emotion categories into the three composite classes
//! negative, positive and surprise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CDE_CLASSES: [&str; 3] = ["negative", "positive", "surprise"];

/// Emotion name to composite class name, keyed per source dataset with a
/// `"*"` fallback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdeMap {
    pub classes: Vec<String>,
    pub map: BTreeMap<String, BTreeMap<String, String>>,
}

impl Default for CdeMap {
    fn default() -> Self {
        let generic: BTreeMap<String, String> = [
            ("happiness", "positive"),
            ("disgust", "negative"),
            ("repression", "negative"),
            ("anger", "negative"),
            ("sadness", "negative"),
            ("fear", "negative"),
            ("contempt", "negative"),
            ("surprise", "surprise"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let smic: BTreeMap<String, String> = CDE_CLASSES.iter().map(|c| (c.to_string(), c.to_string())).collect();
        CdeMap {
            classes: CDE_CLASSES.iter().map(|s| s.to_string()).collect(),
            map: [("*".to_string(), generic), ("smic".to_string(), smic)].into_iter().collect(),
        }
    }
}

impl CdeMap {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Maps an emotion label from `source` to its composite class index.
pub fn cde_relabel(map: &CdeMap, emotion: &str, source: &str) -> Result<usize> {
    let key = emotion.trim().to_lowercase();
    let table = map.map.get(&source.to_lowercase()).or_else(|| map.map.get("*"));
    let target = table
        .and_then(|t| t.get(&key))
        .ok_or_else(|| Error::Invalid(format!("unmapped label \"{emotion}\" from {source}")))?;
    map.class_index(target)
        .ok_or_else(|| Error::Invalid(format!("mapping target \"{target}\" is not a class")))
}
