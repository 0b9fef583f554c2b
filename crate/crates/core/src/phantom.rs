//! Synthetic phantom subjects with known ground truth.
//!
//! A phantom is a nested-ellipsoid "brain" (CSF core, white matter shell,
//! grey matter rind) whose white matter is partitioned into Voronoi
//! subregions. Spherical lesions are placed inside the white matter and
//! rendered hyperintense in the pseudo-FLAIR channel and hypointense in the
//! pseudo-T1 channel.
//!
//! The region layout depends only on the grid and region count, so a cohort
//! of phantoms shares one pseudo-anatomy (regions are in consistent
//! locations, as with a real atlas); the per-phantom seed drives lesion
//! placement and noise.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    affine_from_spacing, LabelMap, LabelVocabulary, Modality, Sample, Volume,
};

/// Mean intensity per tissue class for one pseudo-modality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TissueMeans {
    pub csf: f32,
    pub gm: f32,
    pub wm: f32,
    pub lesion: f32,
}

/// Per-tissue means for both pseudo-modalities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastTable {
    pub t1: TissueMeans,
    pub flair: TissueMeans,
}

impl Default for ContrastTable {
    fn default() -> Self {
        // Lesions: dark on T1, bright on FLAIR.
        Self {
            t1: TissueMeans { csf: 0.15, gm: 0.65, wm: 1.0, lesion: 0.35 },
            flair: TissueMeans { csf: 0.1, gm: 0.75, wm: 1.0, lesion: 1.9 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Grid shape in data-axis order (d0, d1, d2).
    pub grid_shape: [usize; 3],
    /// Voxel spacing in mm, data-axis order.
    pub spacing: [f64; 3],
    /// Number of white-matter subregions (1..=34).
    pub region_count: u16,
    /// Inclusive range for the number of lesions.
    pub lesion_count: (usize, usize),
    /// Inclusive lesion radius range in mm.
    pub lesion_radius_mm: (f64, f64),
    pub contrast: ContrastTable,
    /// Gaussian intensity noise standard deviation.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_shape: [48, 48, 48],
            spacing: [1.0, 1.0, 1.0],
            region_count: 6,
            lesion_count: (2, 4),
            lesion_radius_mm: (2.5, 5.0),
            contrast: ContrastTable::default(),
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&d| d < 8) {
            return Err(Error::Generation(format!(
                "grid {:?} too small for a phantom (min 8 per axis)",
                self.grid_shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Generation("spacing components must be > 0".into()));
        }
        if self.region_count == 0 || self.region_count > 34 {
            return Err(Error::Generation(format!(
                "region count {} outside 1..=34",
                self.region_count
            )));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::Generation("lesion count range has min > max".into()));
        }
        if !(self.lesion_radius_mm.0 <= self.lesion_radius_mm.1)
            || self.lesion_radius_mm.0 <= 0.0
        {
            return Err(Error::Generation("bad lesion radius range".into()));
        }
        if self.contrast.flair.lesion <= self.contrast.flair.wm {
            return Err(Error::Generation(
                "pseudo-FLAIR lesion mean must exceed WM mean".into(),
            ));
        }
        if self.contrast.t1.lesion >= self.contrast.t1.wm {
            return Err(Error::Generation(
                "pseudo-T1 lesion mean must be below WM mean".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Generation("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
}

/// Squared normalized ellipsoid coordinate of a voxel.
fn ellipsoid_r2(idx: [usize; 3], shape: [usize; 3], scale: f64) -> f64 {
    let mut r2 = 0.0;
    for a in 0..3 {
        let c = (shape[a] as f64 - 1.0) / 2.0;
        let semi = scale * shape[a] as f64 / 2.0;
        let u = (idx[a] as f64 - c) / semi;
        r2 += u * u;
    }
    r2
}

fn tissue_grid(shape: [usize; 3]) -> Array3<Tissue> {
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(a, b, c)| {
        let idx = [a, b, c];
        if ellipsoid_r2(idx, shape, 0.16) <= 1.0 {
            Tissue::Csf
        } else if ellipsoid_r2(idx, shape, 0.68) <= 1.0 {
            Tissue::Wm
        } else if ellipsoid_r2(idx, shape, 0.92) <= 1.0 {
            Tissue::Gm
        } else {
            Tissue::Background
        }
    })
}

/// Voronoi partition of the WM voxels, deterministic per (shape, count).
fn region_partition(
    tissues: &Array3<Tissue>,
    shape: [usize; 3],
    spacing: [f64; 3],
    count: u16,
) -> Result<Array3<u16>> {
    let wm_voxels: Vec<[usize; 3]> = tissues
        .indexed_iter()
        .filter(|(_, &t)| t == Tissue::Wm)
        .map(|((a, b, c), _)| [a, b, c])
        .collect();
    if wm_voxels.len() < count as usize {
        return Err(Error::Generation(format!(
            "white matter has {} voxels, cannot host {count} regions",
            wm_voxels.len()
        )));
    }
    // Layout RNG is independent of the phantom seed so cohorts share anatomy.
    let mut rng = ChaCha20Rng::seed_from_u64(0x57AB_1E00 ^ count as u64);
    let picked = rand::seq::index::sample(&mut rng, wm_voxels.len(), count as usize);
    let seeds: Vec<[f64; 3]> = picked
        .iter()
        .map(|i| {
            let v = wm_voxels[i];
            [
                v[0] as f64 * spacing[0],
                v[1] as f64 * spacing[1],
                v[2] as f64 * spacing[2],
            ]
        })
        .collect();

    let mut regions = Array3::<u16>::zeros((shape[0], shape[1], shape[2]));
    for &[a, b, c] in &wm_voxels {
        let p = [
            a as f64 * spacing[0],
            b as f64 * spacing[1],
            c as f64 * spacing[2],
        ];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, s) in seeds.iter().enumerate() {
            let d = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        regions[[a, b, c]] = best as u16 + 1;
    }
    Ok(regions)
}

/// Generate a phantom subject: pseudo-T1, pseudo-FLAIR, lesion mask and
/// region label map, all on one grid. Deterministic given the seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let shape = spec.grid_shape;
    let tissues = tissue_grid(shape);
    let regions = region_partition(&tissues, shape, spec.spacing, spec.region_count)?;

    let wm_voxels: Vec<[usize; 3]> = regions
        .indexed_iter()
        .filter(|(_, &r)| r != 0)
        .map(|((a, b, c), _)| [a, b, c])
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    // Lesions: spheres (in mm) clipped to the white matter.
    let n_lesions = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    if n_lesions > 0 && wm_voxels.is_empty() {
        return Err(Error::Generation(
            "no white-matter voxels available for lesion placement".into(),
        ));
    }
    let mut lesion = Array3::<u16>::zeros((shape[0], shape[1], shape[2]));
    for _ in 0..n_lesions {
        let center = wm_voxels[rng.random_range(0..wm_voxels.len())];
        let radius = rng.random_range(spec.lesion_radius_mm.0..=spec.lesion_radius_mm.1);
        let r2 = radius * radius;
        // Bounding box in voxels.
        let lo_hi = |a: usize| -> (usize, usize) {
            let extent = (radius / spec.spacing[a]).ceil() as usize + 1;
            let lo = center[a].saturating_sub(extent);
            let hi = (center[a] + extent + 1).min(shape[a]);
            (lo, hi)
        };
        let (a0, a1) = lo_hi(0);
        let (b0, b1) = lo_hi(1);
        let (c0, c1) = lo_hi(2);
        for a in a0..a1 {
            for b in b0..b1 {
                for c in c0..c1 {
                    let d2 = ((a as f64 - center[0] as f64) * spec.spacing[0]).powi(2)
                        + ((b as f64 - center[1] as f64) * spec.spacing[1]).powi(2)
                        + ((c as f64 - center[2] as f64) * spec.spacing[2]).powi(2);
                    if d2 <= r2 && regions[[a, b, c]] != 0 {
                        lesion[[a, b, c]] = 1;
                    }
                }
            }
        }
    }

    // Render intensities.
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let render = |means: TissueMeans, rng: &mut ChaCha20Rng| -> Array3<f32> {
        let mut data = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
        for ((idx, x), &t) in data.indexed_iter_mut().zip(tissues.iter()) {
            let mean = if lesion[[idx.0, idx.1, idx.2]] == 1 {
                means.lesion
            } else {
                match t {
                    Tissue::Background => {
                        *x = 0.0;
                        continue;
                    }
                    Tissue::Csf => means.csf,
                    Tissue::Gm => means.gm,
                    Tissue::Wm => means.wm,
                }
            };
            let noise = normal.sample(rng) as f32 * spec.noise_sigma;
            *x = (mean + noise).max(1e-4); // keep brain voxels nonzero
        }
        data
    };
    let t1_data = render(spec.contrast.t1, &mut rng);
    let flair_data = render(spec.contrast.flair, &mut rng);

    let affine = affine_from_spacing(spec.spacing);
    let mk_vol = |data: Array3<f32>| Volume { data, spacing: spec.spacing, affine };

    let mut modalities = BTreeMap::new();
    modalities.insert(Modality::T1, mk_vol(t1_data));
    modalities.insert(Modality::Flair, mk_vol(flair_data));

    Ok(Sample {
        subject_id: format!("phantom_{:04}", spec.seed),
        modalities,
        lesion: Some(LabelMap {
            data: lesion,
            spacing: spec.spacing,
            affine,
            vocabulary: LabelVocabulary::lesion(),
        }),
        regions: Some(LabelMap {
            data: regions,
            spacing: spec.spacing,
            affine,
            vocabulary: LabelVocabulary::regions(spec.region_count),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::regions_present;
    use crate::volume::assert_aligned;

    #[test]
    fn zero_lesion_range_gives_empty_mask() {
        let spec = PhantomSpec { lesion_count: (0, 0), ..Default::default() };
        let s = generate_phantom(&spec).unwrap();
        assert!(s.lesion.unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = PhantomSpec { seed: 42, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        for m in [Modality::T1, Modality::Flair] {
            let va = &a.modalities[&m].data;
            let vb = &b.modalities[&m].data;
            assert!(va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.lesion.unwrap().data, b.lesion.unwrap().data);
        assert_eq!(a.regions.unwrap().data, b.regions.unwrap().data);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_phantom(&PhantomSpec { seed: 1, ..Default::default() }).unwrap();
        let b = generate_phantom(&PhantomSpec { seed: 2, ..Default::default() }).unwrap();
        let da = &a.modalities[&Modality::Flair].data;
        let db = &b.modalities[&Modality::Flair].data;
        assert!(da.iter().zip(db.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn contrast_polarity_holds_on_masked_means() {
        let spec = PhantomSpec { seed: 7, lesion_count: (3, 3), ..Default::default() };
        let s = generate_phantom(&spec).unwrap();
        let lesion = s.lesion.as_ref().unwrap();
        let regions = s.regions.as_ref().unwrap();
        assert!(lesion.data.iter().any(|&v| v == 1), "phantom must have lesion voxels");

        // Oracle: masked means computed directly on the output.
        let masked_mean = |vol: &Volume, want_lesion: bool| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for ((idx, &x), (&l, &r)) in vol
                .data
                .indexed_iter()
                .zip(lesion.data.iter().zip(regions.data.iter()))
            {
                let _ = idx;
                let in_lesion = l == 1;
                let in_wm = r != 0;
                if in_wm && in_lesion == want_lesion {
                    sum += x as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let flair = &s.modalities[&Modality::Flair];
        let t1 = &s.modalities[&Modality::T1];
        assert!(masked_mean(flair, true) > masked_mean(flair, false));
        assert!(masked_mean(t1, true) < masked_mean(t1, false));
    }

    #[test]
    fn lesions_are_subset_of_regions_and_grids_align() {
        let s = generate_phantom(&PhantomSpec { seed: 3, ..Default::default() }).unwrap();
        assert_aligned(&s).unwrap();
        let lesion = s.lesion.as_ref().unwrap();
        let regions = s.regions.as_ref().unwrap();
        for (&l, &r) in lesion.data.iter().zip(regions.data.iter()) {
            assert!(l == 0 || r != 0);
        }
    }

    #[test]
    fn region_count_matches_spec() {
        for k in [1u16, 4, 9] {
            let spec = PhantomSpec { region_count: k, ..Default::default() };
            let s = generate_phantom(&spec).unwrap();
            let ids = regions_present(s.regions.as_ref().unwrap());
            assert_eq!(ids.len(), k as usize, "region_count {k}");
        }
    }

    #[test]
    fn anatomy_is_shared_across_seeds() {
        let a = generate_phantom(&PhantomSpec { seed: 10, ..Default::default() }).unwrap();
        let b = generate_phantom(&PhantomSpec { seed: 99, ..Default::default() }).unwrap();
        assert_eq!(a.regions.unwrap().data, b.regions.unwrap().data);
    }

    #[test]
    fn infeasible_specs_error() {
        let bad = PhantomSpec { grid_shape: [4, 4, 4], ..Default::default() };
        assert!(generate_phantom(&bad).is_err());
        let bad = PhantomSpec { region_count: 0, ..Default::default() };
        assert!(generate_phantom(&bad).is_err());
        let mut bad = PhantomSpec::default();
        bad.contrast.flair.lesion = 0.5; // not hyperintense
        assert!(generate_phantom(&bad).is_err());
    }
}
