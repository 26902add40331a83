use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{FrinetError, Result};

const ISAID_CLASSES: &str = include_str!("../../presets/isaid5i/classes.json");
const ISAID_SPLITS: &str = include_str!("../../presets/isaid5i/splits.json");

/// Base/novel partition of the class table for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fold: usize,
    pub base_classes: Vec<u8>,
    pub novel_classes: Vec<u8>,
    pub class_names: BTreeMap<u8, String>,
}

/// On-disk shape of one fold entry in `splits.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FoldEntry {
    pub base: Vec<u8>,
    pub novel: Vec<u8>,
}

impl SplitConfig {
    pub fn new(fold: usize, novel_classes: Vec<u8>, class_names: BTreeMap<u8, String>) -> Result<Self> {
        let novel: BTreeSet<u8> = novel_classes.iter().copied().collect();
        let base_classes = class_names.keys().copied().filter(|c| !novel.contains(c)).collect();
        let split = SplitConfig {
            fold,
            base_classes,
            novel_classes,
            class_names,
        };
        split.validate(&split.class_names)?;
        Ok(split)
    }

    pub fn validate(&self, class_names: &BTreeMap<u8, String>) -> Result<()> {
        let base: BTreeSet<u8> = self.base_classes.iter().copied().collect();
        let novel: BTreeSet<u8> = self.novel_classes.iter().copied().collect();
        if base.len() != self.base_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(FrinetError::Config(format!("fold {}: duplicate class ids", self.fold)));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(FrinetError::Config(format!(
                "fold {}: class {c} is both base and novel",
                self.fold
            )));
        }
        let all: BTreeSet<u8> = class_names.keys().copied().collect();
        let union: BTreeSet<u8> = base.union(&novel).copied().collect();
        if union != all {
            return Err(FrinetError::Config(format!(
                "fold {}: base ∪ novel does not cover the class table",
                self.fold
            )));
        }
        Ok(())
    }

    pub fn classes_for(&self, phase: super::Phase) -> &[u8] {
        match phase {
            super::Phase::Train => &self.base_classes,
            super::Phase::Test => &self.novel_classes,
        }
    }

    pub fn is_novel(&self, class_id: u8) -> bool {
        self.novel_classes.contains(&class_id)
    }

    pub fn name_of(&self, class_id: u8) -> &str {
        self.class_names.get(&class_id).map(String::as_str).unwrap_or("?")
    }
}

pub(crate) fn parse_class_names(text: &str) -> serde_json::Result<BTreeMap<u8, String>> {
    let raw: BTreeMap<String, String> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u8>()
                .map(|k| (k, v))
                .map_err(|e| serde::de::Error::custom(format!("class id `{k}`: {e}")))
        })
        .collect()
}

pub(crate) fn parse_splits(text: &str, class_names: &BTreeMap<u8, String>) -> Result<Vec<SplitConfig>> {
    let raw: BTreeMap<String, FoldEntry> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|(k, entry)| {
            let fold = k
                .parse::<usize>()
                .map_err(|e| FrinetError::Config(format!("fold key `{k}`: {e}")))?;
            let split = SplitConfig {
                fold,
                base_classes: entry.base,
                novel_classes: entry.novel,
                class_names: class_names.clone(),
            };
            split.validate(class_names)?;
            Ok(split)
        })
        .collect()
}

pub(crate) fn splits_to_json(splits: &[SplitConfig]) -> serde_json::Result<String> {
    let raw: BTreeMap<String, FoldEntry> = splits
        .iter()
        .map(|s| {
            (
                s.fold.to_string(),
                FoldEntry {
                    base: s.base_classes.clone(),
                    novel: s.novel_classes.clone(),
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&raw)
}

/// Class table of the 15-class aerial benchmark (ids 1..=15).
pub fn isaid_class_names() -> BTreeMap<u8, String> {
    parse_class_names(ISAID_CLASSES).expect("bundled class table is valid")
}

/// Bundled three-fold split of the 15-class aerial benchmark.
pub fn isaid_split(fold: usize) -> Result<SplitConfig> {
    let names = isaid_class_names();
    parse_splits(ISAID_SPLITS, &names)?
        .into_iter()
        .find(|s| s.fold == fold)
        .ok_or_else(|| FrinetError::Config(format!("no preset fold {fold}")))
}

/// Three folds over `1..=n` with contiguous novel blocks of near-equal size.
pub fn synthetic_splits(class_names: &BTreeMap<u8, String>) -> Result<Vec<SplitConfig>> {
    let ids: Vec<u8> = class_names.keys().copied().collect();
    let n = ids.len();
    (0..3)
        .map(|fold| {
            let novel = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| i * 3 / n == fold)
                .map(|(_, &c)| c)
                .collect();
            SplitConfig::new(fold, novel, class_names.clone())
        })
        .collect()
}
