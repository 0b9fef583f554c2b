//! Intensity normalization.
//!
//! Multi-site MRI intensities are non-quantitative, so every volume is
//! z-scored before it reaches a model. The pipeline default masks the
//! statistics to nonzero voxels (background in skull-stripped or phantom
//! data is exactly zero); the transform itself is applied to all voxels.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Z-score `v` using statistics over `mask` (all voxels if `None`).
///
/// Output has zero mean and unit variance over the mask region. Degenerate
/// variance (constant volume, empty mask) maps everything to zero.
pub fn normalize(v: &Volume, mask: Option<&LabelMap>) -> Result<Volume> {
    if let Some(m) = mask {
        if m.shape() != v.shape() {
            return Err(Error::Alignment(format!(
                "normalization mask shape {:?} differs from volume shape {:?}",
                m.shape(),
                v.shape()
            )));
        }
    }

    let (mean, var) = match mask {
        None => stats(v.data.iter().copied()),
        Some(m) => stats(
            v.data
                .iter()
                .zip(m.data.iter())
                .filter(|(_, &l)| l != 0)
                .map(|(&x, _)| x),
        ),
    };

    let data = if var <= 0.0 {
        Array3::zeros(v.data.raw_dim())
    } else {
        let sd = var.sqrt();
        v.data.mapv(|x| ((x as f64 - mean) / sd) as f32)
    };
    Ok(Volume { data, spacing: v.spacing, affine: v.affine })
}

/// Pipeline default: z-score over the nonzero voxels of `v` itself.
pub fn normalize_nonzero(v: &Volume) -> Volume {
    let (mean, var) = stats(v.data.iter().copied().filter(|&x| x != 0.0));
    let data = if var <= 0.0 {
        Array3::zeros(v.data.raw_dim())
    } else {
        let sd = var.sqrt();
        v.data.mapv(|x| ((x as f64 - mean) / sd) as f32)
    };
    Volume { data, spacing: v.spacing, affine: v.affine }
}

/// Population mean and variance accumulated in f64.
fn stats(values: impl Iterator<Item = f32>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0f64;
    let mut sum_sq = 0f64;
    for x in values {
        let x = x as f64;
        n += 1;
        sum += x;
        sum_sq += x * x;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    (mean, (sum_sq / n as f64 - mean * mean).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn constant_volume_maps_to_zeros() {
        let v = Volume::from_data(Array3::from_elem((4, 4, 4), 7.0));
        let out = normalize(&v, None).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_point_distribution_becomes_plus_minus_one() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        for (i, x) in data.iter_mut().enumerate() {
            *x = if i % 2 == 0 { 0.0 } else { 2.0 };
        }
        let out = normalize(&Volume::from_data(data), None).unwrap();
        for (i, &x) in out.data.iter().enumerate() {
            let want = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((x - want).abs() < 1e-6);
        }
    }

    #[test]
    fn random_volume_statistics_recompute_to_standard() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(-3.0f32..9.0));
        let out = normalize(&Volume::from_data(data), None).unwrap();
        // Oracle: recompute statistics on the output.
        let n = out.data.len() as f64;
        let mean: f64 = out.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 =
            out.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data = Array3::from_shape_fn((6, 6, 6), |_| rng.random_range(0.0f32..100.0));
        let once = normalize(&Volume::from_data(data), None).unwrap();
        let twice = normalize(&once, None).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_commutes_with_voxel_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let data = Array3::from_shape_fn((4, 5, 6), |_| rng.random_range(-1.0f32..5.0));
        let permuted = data.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        let a = normalize(&Volume::from_data(data), None).unwrap();
        let b = normalize(&Volume::from_data(permuted), None).unwrap();
        let pa = a.data.permuted_axes([2, 0, 1]);
        for (x, y) in pa.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
