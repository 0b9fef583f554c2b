//! Regional-lesion label algebra: intersection construction, binary merge
//! and region-presence queries.

use std::collections::BTreeSet;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, LabelVocabulary};

fn check_same_grid(a: &LabelMap, b: &LabelMap, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Alignment(format!(
            "{what}: grid shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let spacing_ok = a
        .spacing
        .iter()
        .zip(b.spacing.iter())
        .all(|(x, y)| (x - y).abs() <= crate::volume::ALIGN_TOL);
    if !spacing_ok {
        return Err(Error::Alignment(format!(
            "{what}: spacings differ ({:?} vs {:?})",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Regional lesion labels: region id where the lesion mask is set, else 0.
///
/// Lesion voxels outside every region are dropped (value 0); the evaluation
/// report surfaces the dropped volume so the loss of information is visible.
pub fn make_regional(lesion: &LabelMap, regions: &LabelMap) -> Result<LabelMap> {
    check_same_grid(lesion, regions, "make_regional")?;
    if lesion.data.iter().any(|&v| v > 1) {
        return Err(Error::Data("lesion mask must be binary {0,1}".into()));
    }
    let data = Array3::from_shape_fn(regions.data.raw_dim(), |idx| {
        if lesion.data[idx] == 1 {
            regions.data[idx]
        } else {
            0
        }
    });
    Ok(regions.with_data(data, regions.vocabulary.clone()))
}

/// Collapse a regional (or already binary) label map to a binary mask.
pub fn merge_to_binary(regional: &LabelMap) -> LabelMap {
    let data = regional.data.mapv(|v| u16::from(v > 0));
    regional.with_data(data, LabelVocabulary::lesion())
}

/// The set of nonzero ids occurring at one or more voxels.
pub fn regions_present(map: &LabelMap) -> BTreeSet<u16> {
    map.data.iter().filter(|&&v| v != 0).copied().collect()
}
