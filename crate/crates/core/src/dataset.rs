//! Dataset layout: one directory per subject with `t1.nii.gz`,
//! `flair.nii.gz` and optional `lesion.nii.gz` / `regions.nii.gz`, plus a
//! JSON manifest listing subjects and split membership and an optional
//! region vocabulary file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{load_label_map, load_volume, save_label_map, save_volume};
use crate::volume::{LabelVocabulary, Modality, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCABULARY_FILE: &str = "region_vocabulary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        Ok(serde_json::from_str(&std::fs::read_to_string(&path).map_err(
            |e| Error::Config(format!("cannot read {}: {e}", path.display())),
        )?)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(
            root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Filename candidates per role; the first match wins. Covers this layout
/// and the challenge-style `pre/` arrangement.
fn candidates(role: &str) -> Vec<String> {
    let (lower, upper) = match role {
        "t1" => ("t1", "T1"),
        "flair" => ("flair", "FLAIR"),
        "lesion" => ("lesion", "wmh"),
        "regions" => ("regions", "wm_regions"),
        _ => unreachable!(),
    };
    let mut out = Vec::new();
    for name in [lower, upper] {
        for ext in [".nii.gz", ".nii"] {
            out.push(format!("{name}{ext}"));
            out.push(format!("pre/{name}{ext}"));
        }
    }
    out
}

fn find_file(dir: &Path, role: &str) -> Option<PathBuf> {
    candidates(role)
        .into_iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
}

/// Region vocabulary for a dataset root: the JSON file when present,
/// otherwise the generic 34-region namespace.
pub fn load_vocabulary(root: &Path) -> Result<LabelVocabulary> {
    let path = root.join(VOCABULARY_FILE);
    if path.is_file() {
        LabelVocabulary::from_json(&std::fs::read_to_string(&path)?)
    } else {
        Ok(LabelVocabulary::regions(34))
    }
}

/// Load one subject directory.
pub fn load_subject(dir: &Path, id: &str, vocab: &LabelVocabulary) -> Result<Sample> {
    let mut modalities = BTreeMap::new();
    if let Some(p) = find_file(dir, "t1") {
        modalities.insert(Modality::T1, load_volume(p)?);
    }
    if let Some(p) = find_file(dir, "flair") {
        modalities.insert(Modality::Flair, load_volume(p)?);
    }
    if modalities.is_empty() {
        return Err(Error::Config(format!(
            "subject directory {} has no t1/flair volumes",
            dir.display()
        )));
    }
    let lesion = match find_file(dir, "lesion") {
        Some(p) => Some(load_label_map(p, LabelVocabulary::lesion())?),
        None => None,
    };
    let regions = match find_file(dir, "regions") {
        Some(p) => Some(load_label_map(p, vocab.clone())?),
        None => None,
    };
    let sample = Sample { subject_id: id.to_string(), modalities, lesion, regions };
    crate::volume::assert_aligned(&sample)?;
    Ok(sample)
}

/// Write one subject directory in the canonical layout.
pub fn save_subject(root: &Path, s: &Sample) -> Result<PathBuf> {
    let dir = root.join(&s.subject_id);
    std::fs::create_dir_all(&dir)?;
    for (m, v) in &s.modalities {
        save_volume(v, dir.join(format!("{m}.nii.gz")))?;
    }
    if let Some(l) = &s.lesion {
        save_label_map(l, dir.join("lesion.nii.gz"))?;
    }
    if let Some(r) = &s.regions {
        save_label_map(r, dir.join("regions.nii.gz"))?;
    }
    Ok(dir)
}

/// Load a dataset root. Uses the manifest when present, otherwise treats
/// every subdirectory as a train subject.
pub fn load_dataset(root: &Path) -> Result<Vec<(Sample, Split)>> {
    let vocab = load_vocabulary(root)?;
    let entries: Vec<SubjectEntry> = if root.join(MANIFEST_FILE).is_file() {
        Manifest::load(root)?.subjects
    } else {
        let mut dirs: Vec<String> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        dirs.sort();
        dirs.into_iter()
            .map(|id| SubjectEntry { id, split: Split::Train })
            .collect()
    };
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let sample = load_subject(&root.join(&e.id), &e.id, &vocab)?;
        out.push((sample, e.split));
    }
    Ok(out)
}

/// Load and split a dataset root into (train, test).
pub fn load_split(root: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let all = load_dataset(root)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, split) in all {
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}
