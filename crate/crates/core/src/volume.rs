//! Core domain types: volumes, label maps, subjects, tasks and input
//! configurations.
//!
//! Canonical axis convention: all grids are stored as `Array3` with shape
//! `(d0, d1, d2)` = (slice, row, column). This matches NIfTI's on-disk order
//! (first image axis fastest) read straight into a C-order array, so axis 0
//! is the slowest-varying (slice) axis. `spacing[a]` is the voxel edge length
//! in mm along data axis `a`; the affine maps NIfTI voxel indices
//! `(i, j, k, 1)` (i = fastest axis = data axis 2) to world mm.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for spacing (mm) and affine entry comparisons.
pub const ALIGN_TOL: f64 = 1e-4;

/// 4x4 voxel-to-world transform, row major.
pub type Affine = [[f64; 4]; 4];

/// Identity affine scaled by the given spacing (data-axis order).
pub fn affine_from_spacing(spacing: [f64; 3]) -> Affine {
    // spacing is (d0, d1, d2) = (slice, row, col); NIfTI i axis = col.
    [
        [spacing[2], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[0], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn det3(m: &Affine) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// A 3D scalar grid with voxel spacing and world affine.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel edge lengths in mm, data-axis order (d0, d1, d2).
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], affine: Affine) -> Result<Self> {
        let v = Self { data, spacing, affine };
        v.validate()?;
        Ok(v)
    }

    /// Grid with unit spacing and identity-scaled affine.
    pub fn from_data(data: Array3<f32>) -> Self {
        Self {
            data,
            spacing: [1.0, 1.0, 1.0],
            affine: affine_from_spacing([1.0, 1.0, 1.0]),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!(
                "spacing components must be > 0, got {:?}",
                self.spacing
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("volume contains NaN/Inf voxels".into()));
        }
        if det3(&self.affine).abs() < 1e-12 {
            return Err(Error::Data("affine is not invertible".into()));
        }
        Ok(())
    }
}

/// One named label id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u16,
    pub name: String,
}

/// Set of valid label ids with names. Id 0 (background) is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub entries: Vec<LabelEntry>,
}

impl LabelVocabulary {
    /// The lesion-mask vocabulary: a single foreground id 1.
    pub fn lesion() -> Self {
        Self {
            entries: vec![LabelEntry { id: 1, name: "lesion".into() }],
        }
    }

    /// Generic region vocabulary with ids `1..=count`.
    pub fn regions(count: u16) -> Self {
        Self {
            entries: (1..=count)
                .map(|id| LabelEntry { id, name: format!("wm_region_{id:02}") })
                .collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let entries: Vec<LabelEntry> = serde_json::from_str(json)?;
        let vocab = Self { entries };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("vocabulary serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.id == 0 {
                return Err(Error::Data("label id 0 is reserved for background".into()));
            }
            if !seen.insert(e.id) {
                return Err(Error::Data(format!("duplicate label id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: u16) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn name_of(&self, id: u16) -> Option<&str> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.name.as_str())
    }

    pub fn max_id(&self) -> u16 {
        self.entries.iter().map(|e| e.id).max().unwrap_or(0)
    }
}

/// A 3D integer label grid sharing the companion volume's geometry.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub data: Array3<u16>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub vocabulary: LabelVocabulary,
}

impl LabelMap {
    pub fn new(
        data: Array3<u16>,
        spacing: [f64; 3],
        affine: Affine,
        vocabulary: LabelVocabulary,
    ) -> Result<Self> {
        let m = Self { data, spacing, affine, vocabulary };
        m.validate()?;
        Ok(m)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Same grid geometry as `self` but with new data and vocabulary.
    pub fn with_data(&self, data: Array3<u16>, vocabulary: LabelVocabulary) -> Self {
        Self { data, spacing: self.spacing, affine: self.affine, vocabulary }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        for &v in self.data.iter() {
            if v != 0 && !self.vocabulary.contains(v) {
                return Err(Error::Data(format!(
                    "label id {v} not in vocabulary (max id {})",
                    self.vocabulary.max_id()
                )));
            }
        }
        Ok(())
    }
}

/// MRI modality tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    Flair,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::Flair => "flair",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "flair" => Ok(Modality::Flair),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// One subject: modality volumes plus optional lesion and region labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject_id: String,
    pub modalities: BTreeMap<Modality, Volume>,
    pub lesion: Option<LabelMap>,
    pub regions: Option<LabelMap>,
}

impl Sample {
    pub fn modality(&self, m: Modality) -> Option<&Volume> {
        self.modalities.get(&m)
    }

    pub fn grid_shape(&self) -> Option<[usize; 3]> {
        self.modalities.values().next().map(|v| v.shape())
    }
}

/// What the network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Binary lesion mask (background + lesion).
    Lesion,
    /// 34 anatomical WM regions plus background.
    Region,
    /// Regional lesion labels: region id where lesion, else background.
    Joint,
}

impl TaskKind {
    /// Class count is fully determined by the task.
    pub fn num_classes(&self) -> usize {
        match self {
            TaskKind::Lesion => 2,
            TaskKind::Region => 35,
            TaskKind::Joint => 35,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Lesion => "lesion",
            TaskKind::Region => "region",
            TaskKind::Joint => "joint",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lesion" => Ok(TaskKind::Lesion),
            "region" | "regions" => Ok(TaskKind::Region),
            "joint" => Ok(TaskKind::Joint),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Input configuration used during training (matrix rows A-D).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConfig {
    /// (A) single-channel FLAIR.
    FlairOnly,
    /// (B) single-channel T1.
    T1Only,
    /// (C) two channels, fixed order (T1, FLAIR).
    Concat,
    /// (D) one single-channel model fed either modality.
    Interchangeable,
}

impl InputConfig {
    /// Modalities a subject must provide for this configuration.
    pub fn required_modalities(&self) -> &'static [Modality] {
        match self {
            InputConfig::FlairOnly => &[Modality::Flair],
            InputConfig::T1Only => &[Modality::T1],
            InputConfig::Concat | InputConfig::Interchangeable => {
                &[Modality::T1, Modality::Flair]
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            InputConfig::Concat => 2,
            _ => 1,
        }
    }

    /// Matrix letter used in reports (Fig-style A/B/C/D).
    pub fn letter(&self) -> &'static str {
        match self {
            InputConfig::FlairOnly => "A",
            InputConfig::T1Only => "B",
            InputConfig::Concat => "C",
            InputConfig::Interchangeable => "D",
        }
    }
}

impl std::fmt::Display for InputConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InputConfig::FlairOnly => "flair_only",
            InputConfig::T1Only => "t1_only",
            InputConfig::Concat => "concat",
            InputConfig::Interchangeable => "interchangeable",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for InputConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "flair_only" | "flair-only" | "flair" => Ok(InputConfig::FlairOnly),
            "b" | "t1_only" | "t1-only" | "t1" => Ok(InputConfig::T1Only),
            "c" | "concat" => Ok(InputConfig::Concat),
            "d" | "interchangeable" => Ok(InputConfig::Interchangeable),
            other => Err(Error::Config(format!("unknown input config '{other}'"))),
        }
    }
}

fn affines_close(a: &Affine, b: &Affine, tol: f64) -> bool {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .all(|(x, y)| (x - y).abs() <= tol)
}

struct GridRef<'a> {
    name: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: &'a Affine,
}

/// Check that every grid in the sample shares shape, spacing and affine.
///
/// Shape must match exactly; spacing and affine within [`ALIGN_TOL`].
pub fn assert_aligned(s: &Sample) -> Result<()> {
    let mut grids: Vec<GridRef> = Vec::new();
    for (m, v) in &s.modalities {
        grids.push(GridRef {
            name: m.to_string(),
            shape: v.shape(),
            spacing: v.spacing,
            affine: &v.affine,
        });
    }
    if let Some(l) = &s.lesion {
        grids.push(GridRef {
            name: "lesion".into(),
            shape: l.shape(),
            spacing: l.spacing,
            affine: &l.affine,
        });
    }
    if let Some(r) = &s.regions {
        grids.push(GridRef {
            name: "regions".into(),
            shape: r.shape(),
            spacing: r.spacing,
            affine: &r.affine,
        });
    }
    let Some(first) = grids.first() else { return Ok(()) };
    for g in &grids[1..] {
        if g.shape != first.shape {
            return Err(Error::Alignment(format!(
                "subject {}: {} shape {:?} differs from {} shape {:?}",
                s.subject_id, g.name, g.shape, first.name, first.shape
            )));
        }
        let spacing_ok = g
            .spacing
            .iter()
            .zip(first.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= ALIGN_TOL);
        if !spacing_ok {
            return Err(Error::Alignment(format!(
                "subject {}: {} spacing {:?} differs from {} spacing {:?}",
                s.subject_id, g.name, g.spacing, first.name, first.spacing
            )));
        }
        if !affines_close(g.affine, first.affine, ALIGN_TOL) {
            return Err(Error::Alignment(format!(
                "subject {}: {} affine differs from {} affine",
                s.subject_id, g.name, first.name
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn unit_volume(shape: (usize, usize, usize)) -> Volume {
        Volume::from_data(Array3::zeros(shape))
    }

    fn sample_with(t1: Volume, flair: Volume) -> Sample {
        let mut modalities = BTreeMap::new();
        modalities.insert(Modality::T1, t1);
        modalities.insert(Modality::Flair, flair);
        Sample { subject_id: "s0".into(), modalities, lesion: None, regions: None }
    }

    #[test]
    fn task_class_counts() {
        assert_eq!(TaskKind::Lesion.num_classes(), 2);
        assert_eq!(TaskKind::Region.num_classes(), 35);
        assert_eq!(TaskKind::Joint.num_classes(), 35);
    }

    #[test]
    fn aligned_sample_passes() {
        let s = sample_with(unit_volume((4, 5, 6)), unit_volume((4, 5, 6)));
        assert_aligned(&s).unwrap();
    }

    #[test]
    fn cropped_slice_fails_alignment() {
        let s = sample_with(unit_volume((3, 5, 6)), unit_volume((4, 5, 6)));
        let err = assert_aligned(&s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t1") || msg.contains("flair"), "{msg}");
    }

    #[test]
    fn spacing_inside_tolerance_passes() {
        let mut t1 = unit_volume((4, 5, 6));
        t1.spacing = [1.0 + 1e-6, 1.0, 1.0];
        let s = sample_with(t1, unit_volume((4, 5, 6)));
        assert_aligned(&s).unwrap();
    }

    #[test]
    fn spacing_outside_tolerance_fails() {
        let mut t1 = unit_volume((4, 5, 6));
        t1.spacing = [1.01, 1.0, 1.0];
        let s = sample_with(t1, unit_volume((4, 5, 6)));
        assert!(assert_aligned(&s).is_err());
    }

    #[test]
    fn nan_volume_rejected() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 1, 0]] = f32::NAN;
        assert!(Volume::new(data, [1.0; 3], affine_from_spacing([1.0; 3])).is_err());
    }

    #[test]
    fn label_outside_vocabulary_rejected() {
        let mut data = Array3::<u16>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 3;
        let res = LabelMap::new(
            data,
            [1.0; 3],
            affine_from_spacing([1.0; 3]),
            LabelVocabulary::lesion(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = LabelVocabulary::regions(34);
        let parsed = LabelVocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(parsed, v);
        assert_eq!(parsed.max_id(), 34);
        assert_eq!(parsed.name_of(7), Some("wm_region_07"));
    }
}
