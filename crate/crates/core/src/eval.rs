//! Dice evaluation, multi-class region scoring with presence filtering, and
//! region-wise lesion burden reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{make_regional, merge_to_binary, regions_present};
use crate::volume::{LabelMap, ALIGN_TOL};

fn check_aligned(a: &LabelMap, b: &LabelMap, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Alignment(format!(
            "{what}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let ok = a
        .spacing
        .iter()
        .zip(b.spacing.iter())
        .all(|(x, y)| (x - y).abs() <= ALIGN_TOL);
    if !ok {
        return Err(Error::Alignment(format!("{what}: spacings differ")));
    }
    Ok(())
}

/// Binary Dice with the both-empty flag surfaced.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks empty; the 1.0 is by convention, flag it for aggregation.
    pub both_empty: bool,
}

/// Dice-Sorensen coefficient 2|P∩G| / (|P|+|G|) on masks taken as voxel>0.
/// Both masks empty gives 1.0 by convention.
pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    dice_detailed(pred, gt).map(|d| d.value)
}

pub fn dice_detailed(pred: &LabelMap, gt: &LabelMap) -> Result<DiceScore> {
    check_aligned(pred, gt, "dice")?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.data.iter().zip(gt.data.iter()) {
        let pa = a > 0;
        let gb = b > 0;
        p += pa as usize;
        g += gb as usize;
        inter += (pa && gb) as usize;
    }
    if p + g == 0 {
        return Ok(DiceScore { value: 1.0, both_empty: true });
    }
    Ok(DiceScore {
        value: 2.0 * inter as f64 / (p + g) as f64,
        both_empty: false,
    })
}

/// Per-class Dice over the region ids present in the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionDice {
    pub per_class: BTreeMap<u16, f64>,
    /// Mean over present classes; `None` when no region is present.
    pub mean: Option<f64>,
}

/// Per-class Dice computed only for classes present in `gt`; classes the
/// prediction misses entirely score 0 and stay in the mean.
pub fn mean_dice_regions(pred: &LabelMap, gt: &LabelMap) -> Result<RegionDice> {
    check_aligned(pred, gt, "mean_dice_regions")?;
    let present = regions_present(gt);
    let mut per_class = BTreeMap::new();
    for &id in &present {
        let mut inter = 0usize;
        let mut p = 0usize;
        let mut g = 0usize;
        for (&a, &b) in pred.data.iter().zip(gt.data.iter()) {
            let pa = a == id;
            let gb = b == id;
            p += pa as usize;
            g += gb as usize;
            inter += (pa && gb) as usize;
        }
        // g > 0 by presence, so the denominator is never zero.
        per_class.insert(id, 2.0 * inter as f64 / (p + g) as f64);
    }
    let mean = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    Ok(RegionDice { per_class, mean })
}

/// Joint-model scores: lesion and region quality evaluated separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointScores {
    pub lesion_dice: f64,
    pub lesion_both_empty: bool,
    pub region_mean_dice: Option<f64>,
    pub region_per_class: BTreeMap<u16, f64>,
}

/// Evaluate a regional-lesion prediction against lesion and region ground
/// truth: lesion Dice on the merged binary mask, region Dice against the
/// masked regional labels, restricted to present regions.
pub fn evaluate_joint(
    pred_regional: &LabelMap,
    gt_lesion: &LabelMap,
    gt_regions: &LabelMap,
) -> Result<JointScores> {
    check_aligned(pred_regional, gt_lesion, "evaluate_joint")?;
    check_aligned(pred_regional, gt_regions, "evaluate_joint")?;
    let pred_binary = merge_to_binary(pred_regional);
    let lesion = dice_detailed(&pred_binary, gt_lesion)?;
    let gt_regional = make_regional(gt_lesion, gt_regions)?;
    let region = mean_dice_regions(pred_regional, &gt_regional)?;
    Ok(JointScores {
        lesion_dice: lesion.value,
        lesion_both_empty: lesion.both_empty,
        region_mean_dice: region.mean,
        region_per_class: region.per_class,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionBurden {
    pub id: u16,
    pub name: String,
    pub lesion_voxels: usize,
    pub lesion_volume_mm3: f64,
    /// Lesion volume as a fraction of the region volume.
    pub fraction_of_region: f64,
}

/// Region-wise lesion burden. Lesion voxels are localized by the region map
/// voxel they fall on; voxels outside every region are reported as dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BurdenReport {
    pub regions: Vec<RegionBurden>,
    pub total_lesion_voxels: usize,
    pub total_lesion_volume_mm3: f64,
    pub dropped_voxels: usize,
    pub dropped_volume_mm3: f64,
}

impl BurdenReport {
    /// CSV with one row per region plus totals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "region_id,region_name,lesion_voxels,lesion_volume_mm3,fraction_of_region\n",
        );
        for r in &self.regions {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.id, r.name, r.lesion_voxels, r.lesion_volume_mm3, r.fraction_of_region
            ));
        }
        out.push_str(&format!(
            "total,,{},{:.6},\n",
            self.total_lesion_voxels, self.total_lesion_volume_mm3
        ));
        out.push_str(&format!(
            "dropped,,{},{:.6},\n",
            self.dropped_voxels, self.dropped_volume_mm3
        ));
        out
    }
}

/// Compute per-region lesion burden for a (regional or binary) lesion map.
pub fn burden(pred_regional: &LabelMap, regions: &LabelMap) -> Result<BurdenReport> {
    check_aligned(pred_regional, regions, "burden")?;
    let voxel_mm3 = regions.voxel_volume();

    let mut per_region: BTreeMap<u16, usize> = BTreeMap::new();
    let mut region_sizes: BTreeMap<u16, usize> = BTreeMap::new();
    let mut dropped = 0usize;
    let mut total = 0usize;
    for (&lesion_id, &region_id) in pred_regional.data.iter().zip(regions.data.iter()) {
        if region_id != 0 {
            *region_sizes.entry(region_id).or_default() += 1;
        }
        if lesion_id > 0 {
            total += 1;
            if region_id == 0 {
                dropped += 1;
            } else {
                *per_region.entry(region_id).or_default() += 1;
            }
        }
    }

    let regions_out: Vec<RegionBurden> = region_sizes
        .iter()
        .map(|(&id, &size)| {
            let voxels = per_region.get(&id).copied().unwrap_or(0);
            RegionBurden {
                id,
                name: regions
                    .vocabulary
                    .name_of(id)
                    .unwrap_or("unknown")
                    .to_string(),
                lesion_voxels: voxels,
                lesion_volume_mm3: voxels as f64 * voxel_mm3,
                fraction_of_region: voxels as f64 / size as f64,
            }
        })
        .collect();

    Ok(BurdenReport {
        regions: regions_out,
        total_lesion_voxels: total,
        total_lesion_volume_mm3: total as f64 * voxel_mm3,
        dropped_voxels: dropped,
        dropped_volume_mm3: dropped as f64 * voxel_mm3,
    })
}

/// Mean and (population) standard deviation, mirroring the tables'
/// mean +/- SD presentation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{affine_from_spacing, LabelVocabulary};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn mask(data: Array3<u16>) -> LabelMap {
        LabelMap {
            data,
            spacing: [1.0; 3],
            affine: affine_from_spacing([1.0; 3]),
            vocabulary: LabelVocabulary::lesion(),
        }
    }

    fn region_map(data: Array3<u16>, spacing: [f64; 3]) -> LabelMap {
        LabelMap {
            data,
            spacing,
            affine: affine_from_spacing(spacing),
            vocabulary: LabelVocabulary::regions(34),
        }
    }

    #[test]
    fn identical_disjoint_and_half_overlap_cases() {
        let mut a = Array3::<u16>::zeros((4, 4, 4));
        a[[0, 0, 0]] = 1;
        a[[1, 1, 1]] = 1;
        let ma = mask(a.clone());
        assert_eq!(dice(&ma, &ma).unwrap(), 1.0);

        let mut b = Array3::<u16>::zeros((4, 4, 4));
        b[[2, 2, 2]] = 1;
        b[[3, 3, 3]] = 1;
        assert_eq!(dice(&ma, &mask(b)).unwrap(), 0.0);

        // |P|=|G|=2, overlap 1 -> 2*1/4 = 0.5.
        let mut c = Array3::<u16>::zeros((4, 4, 4));
        c[[0, 0, 0]] = 1;
        c[[3, 0, 0]] = 1;
        assert_eq!(dice(&ma, &mask(c)).unwrap(), 0.5);
    }

    #[test]
    fn both_empty_is_one_and_flagged() {
        let e = mask(Array3::zeros((3, 3, 3)));
        let d = dice_detailed(&e, &e).unwrap();
        assert_eq!(d.value, 1.0);
        assert!(d.both_empty);
        // Self-dice on a nonempty mask is 1 and unflagged.
        let mut m = Array3::<u16>::zeros((3, 3, 3));
        m[[1, 1, 1]] = 1;
        let d = dice_detailed(&mask(m.clone()), &mask(m)).unwrap();
        assert_eq!(d.value, 1.0);
        assert!(!d.both_empty);
    }

    #[test]
    fn misaligned_masks_error() {
        let a = mask(Array3::zeros((3, 3, 3)));
        let b = mask(Array3::zeros((3, 3, 4)));
        assert!(dice(&a, &b).is_err());
    }

    #[test]
    fn region_dice_perfect_and_missing_class() {
        let mut g = Array3::<u16>::zeros((4, 4, 4));
        g[[0, 0, 0]] = 3;
        g[[1, 1, 1]] = 5;
        g[[2, 2, 2]] = 7;
        let gt = region_map(g.clone(), [1.0; 3]);
        let perfect = mean_dice_regions(&gt, &gt).unwrap();
        assert_eq!(perfect.mean, Some(1.0));
        assert_eq!(perfect.per_class.len(), 3);

        // Prediction misses region 5 entirely: class-5 Dice 0 stays in.
        let mut p = g.clone();
        p[[1, 1, 1]] = 0;
        let scored = mean_dice_regions(&region_map(p, [1.0; 3]), &gt).unwrap();
        assert_eq!(scored.per_class[&5], 0.0);
        assert!((scored.mean.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_regions_is_flagged_not_nan() {
        let gt = region_map(Array3::zeros((3, 3, 3)), [1.0; 3]);
        let out = mean_dice_regions(&gt, &gt).unwrap();
        assert!(out.mean.is_none());
        assert!(out.per_class.is_empty());
    }

    #[test]
    fn region_dice_matches_per_class_binary_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pred = Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(0..5u16));
        let gt = Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(0..5u16));
        let scored =
            mean_dice_regions(&region_map(pred.clone(), [1.0; 3]), &region_map(gt.clone(), [1.0; 3]))
                .unwrap();
        for (&id, &value) in &scored.per_class {
            // Oracle: binary dice on each id's indicator.
            let pi = mask(pred.mapv(|v| u16::from(v == id)));
            let gi = mask(gt.mapv(|v| u16::from(v == id)));
            let want = dice(&pi, &gi).unwrap();
            assert!((value - want).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_round_trip_scores_one() {
        let mut lesion = Array3::<u16>::zeros((5, 5, 5));
        lesion[[1, 1, 1]] = 1;
        lesion[[2, 3, 2]] = 1;
        let mut regions = Array3::<u16>::zeros((5, 5, 5));
        regions.fill(4);
        regions[[2, 3, 2]] = 9;
        let lesion = mask(lesion);
        let regions = region_map(regions, [1.0; 3]);
        let pred = make_regional(&lesion, &regions).unwrap();
        let scores = evaluate_joint(&pred, &lesion, &regions).unwrap();
        assert_eq!(scores.lesion_dice, 1.0);
        assert_eq!(scores.region_mean_dice, Some(1.0));
    }

    #[test]
    fn all_zero_prediction_scores_zero_lesion_dice() {
        let mut lesion = Array3::<u16>::zeros((4, 4, 4));
        lesion[[1, 1, 1]] = 1;
        let regions = region_map(Array3::from_elem((4, 4, 4), 2), [1.0; 3]);
        let pred = region_map(Array3::zeros((4, 4, 4)), [1.0; 3]);
        let scores = evaluate_joint(&pred, &mask(lesion), &regions).unwrap();
        assert_eq!(scores.lesion_dice, 0.0);
    }

    #[test]
    fn burden_arithmetic_and_conservation() {
        // 10 lesion voxels in region 7 at spacing (1,1,3) -> 30 mm^3.
        let mut regions = Array3::<u16>::zeros((5, 5, 5));
        for i in 0..50 {
            regions[[i / 25, (i / 5) % 5, i % 5]] = 7;
        }
        let mut lesion = Array3::<u16>::zeros((5, 5, 5));
        for i in 0..10 {
            lesion[[0, i / 5, i % 5]] = 1;
        }
        // One lesion voxel outside every region.
        lesion[[4, 4, 4]] = 1;
        let spacing = [3.0, 1.0, 1.0];
        let report = burden(&region_map(lesion, spacing), &region_map(regions, spacing)).unwrap();
        let r7 = report.regions.iter().find(|r| r.id == 7).unwrap();
        assert_eq!(r7.lesion_voxels, 10);
        assert!((r7.lesion_volume_mm3 - 30.0).abs() < 1e-9);
        assert_eq!(report.dropped_voxels, 1);
        // Conservation: per-region + dropped == total.
        let sum: usize = report.regions.iter().map(|r| r.lesion_voxels).sum();
        assert_eq!(sum + report.dropped_voxels, report.total_lesion_voxels);
        assert!(report.to_csv().contains("wm_region_07"));
    }

    #[test]
    fn no_lesions_gives_all_zero_burden() {
        let regions = region_map(Array3::from_elem((3, 3, 3), 2), [1.0; 3]);
        let lesion = region_map(Array3::zeros((3, 3, 3)), [1.0; 3]);
        let report = burden(&lesion, &regions).unwrap();
        assert_eq!(report.total_lesion_voxels, 0);
        assert!(report.regions.iter().all(|r| r.lesion_voxels == 0));
    }

    proptest! {
        /// dice is symmetric and self-dice is 1 (including empty).
        #[test]
        fn dice_symmetry_and_self(
            a_bits in proptest::collection::vec(0u16..=1, 64),
            b_bits in proptest::collection::vec(0u16..=1, 64),
        ) {
            let a = mask(Array3::from_shape_vec((4, 4, 4), a_bits).unwrap());
            let b = mask(Array3::from_shape_vec((4, 4, 4), b_bits).unwrap());
            let ab = dice(&a, &b).unwrap();
            let ba = dice(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }

        /// Conservation holds for arbitrary regional maps.
        #[test]
        fn burden_conservation(
            lesion_ids in proptest::collection::vec(0u16..=3, 64),
            region_ids in proptest::collection::vec(0u16..=3, 64),
        ) {
            let lesion = region_map(Array3::from_shape_vec((4, 4, 4), lesion_ids).unwrap(), [1.0;3]);
            let regions = region_map(Array3::from_shape_vec((4, 4, 4), region_ids).unwrap(), [1.0;3]);
            let report = burden(&lesion, &regions).unwrap();
            let sum: usize = report.regions.iter().map(|r| r.lesion_voxels).sum();
            prop_assert_eq!(sum + report.dropped_voxels, report.total_lesion_voxels);
            let vol_sum: f64 = report.regions.iter().map(|r| r.lesion_volume_mm3).sum();
            prop_assert!((vol_sum + report.dropped_volume_mm3 - report.total_lesion_volume_mm3).abs() < 1e-9);
        }
    }
}
