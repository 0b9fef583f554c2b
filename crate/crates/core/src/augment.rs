//! MRI-style patch augmentation: additive and multiplicative noise, bias
//! field distortion, elastic deformation, random rotation and simulated
//! motion ghosts.
//!
//! Intensity transforms never touch the target. Spatial transforms apply one
//! displacement field to every channel (trilinear) and to the target
//! (nearest neighbour), so no new label ids can appear. A fixed seed gives
//! bit-identical output.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Patch;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasFieldCfg {
    /// Polynomial order of the multiplicative field.
    pub order: usize,
    /// Peak relative amplitude (field values lie in [-a, a]).
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElasticCfg {
    /// Control-point spacing in mm.
    pub control_spacing_mm: f64,
    /// Maximum per-axis control displacement in mm.
    pub max_displacement_mm: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RotationCfg {
    /// Maximum rotation per axis, degrees.
    pub max_degrees: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotionCfg {
    /// Maximum number of ghost echoes.
    pub max_ghosts: usize,
    /// Ghost intensity relative to the signal.
    pub intensity: f64,
}

/// Enable flags (via `Option`) and magnitude ranges for every transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Additive Gaussian noise; sigma drawn from this range, expressed as a
    /// fraction of the per-channel intensity SD.
    pub additive_noise: Option<(f64, f64)>,
    /// Global per-channel intensity factor range.
    pub multiplicative_noise: Option<(f64, f64)>,
    pub bias_field: Option<BiasFieldCfg>,
    pub elastic: Option<ElasticCfg>,
    pub rotation: Option<RotationCfg>,
    pub motion: Option<MotionCfg>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            additive_noise: Some((0.0, 0.1)),
            multiplicative_noise: Some((0.9, 1.1)),
            bias_field: Some(BiasFieldCfg { order: 3, amplitude: 0.3 }),
            elastic: Some(ElasticCfg { control_spacing_mm: 16.0, max_displacement_mm: 4.0 }),
            rotation: Some(RotationCfg { max_degrees: [15.0; 3] }),
            motion: Some(MotionCfg { max_ghosts: 2, intensity: 0.1 }),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Everything disabled; `augment` becomes the identity.
    pub fn disabled(seed: u64) -> Self {
        Self {
            additive_noise: None,
            multiplicative_noise: None,
            bias_field: None,
            elastic: None,
            rotation: None,
            motion: None,
            seed,
        }
    }

    /// Intensity-only transforms (keeps label geometry crisp).
    pub fn light(seed: u64) -> Self {
        Self {
            elastic: None,
            rotation: None,
            motion: None,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: &(f64, f64)| r.0 <= r.1;
        if let Some(r) = &self.additive_noise {
            if !range_ok(r) || r.0 < 0.0 {
                return Err(Error::Config("additive noise sigma range invalid".into()));
            }
        }
        if let Some(r) = &self.multiplicative_noise {
            if !range_ok(r) {
                return Err(Error::Config("multiplicative factor range invalid".into()));
            }
        }
        if let Some(b) = &self.bias_field {
            if b.amplitude < 0.0 {
                return Err(Error::Config("bias amplitude must be >= 0".into()));
            }
        }
        if let Some(e) = &self.elastic {
            if e.max_displacement_mm < 0.0 || e.control_spacing_mm <= 0.0 {
                return Err(Error::Config("elastic parameters invalid".into()));
            }
        }
        if let Some(r) = &self.rotation {
            if r.max_degrees.iter().any(|&d| d < 0.0) {
                return Err(Error::Config("rotation angles must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Resample a patch through `source = R^T (p - c) + c + disp(p)`, rotating
/// about the patch centre. Channels use trilinear interpolation, the target
/// nearest neighbour; out-of-patch sources read as zero/background.
pub fn spatial_transform(
    p: &Patch,
    rotation: &[[f64; 3]; 3],
    displacement_mm: Option<&Array4<f64>>,
) -> Patch {
    let size = p.spatial_shape();
    let sp = p.spacing;
    let center: [f64; 3] = std::array::from_fn(|a| (size[a] as f64 - 1.0) / 2.0 * sp[a]);

    let channels = p.inputs.shape()[0];
    let mut inputs = Array4::<f32>::zeros(p.inputs.raw_dim());
    let mut target = Array3::<u16>::zeros(p.target.raw_dim());

    for a in 0..size[0] {
        for b in 0..size[1] {
            for c in 0..size[2] {
                let pos = [a as f64 * sp[0], b as f64 * sp[1], c as f64 * sp[2]];
                let rel: [f64; 3] = std::array::from_fn(|i| pos[i] - center[i]);
                // Inverse rotation = transpose.
                let mut src: [f64; 3] = std::array::from_fn(|i| {
                    rotation[0][i] * rel[0] + rotation[1][i] * rel[1] + rotation[2][i] * rel[2]
                        + center[i]
                });
                if let Some(d) = displacement_mm {
                    for (i, s) in src.iter_mut().enumerate() {
                        *s += d[[i, a, b, c]];
                    }
                }
                let vox: [f64; 3] = std::array::from_fn(|i| src[i] / sp[i]);

                for ci in 0..channels {
                    inputs[[ci, a, b, c]] = trilinear(&p.inputs, ci, vox, size);
                }
                target[[a, b, c]] = nearest(&p.target, vox, size);
            }
        }
    }

    Patch { inputs, target, channel_tags: p.channel_tags.clone(), spacing: p.spacing }
}

fn trilinear(inputs: &Array4<f32>, ch: usize, vox: [f64; 3], size: [usize; 3]) -> f32 {
    let f: [f64; 3] = std::array::from_fn(|i| vox[i].floor());
    let w: [f64; 3] = std::array::from_fn(|i| vox[i] - f[i]);
    let mut acc = 0.0f64;
    for da in 0..2usize {
        for db in 0..2usize {
            for dc in 0..2usize {
                let idx = [
                    f[0] as isize + da as isize,
                    f[1] as isize + db as isize,
                    f[2] as isize + dc as isize,
                ];
                let weight = (if da == 0 { 1.0 - w[0] } else { w[0] })
                    * (if db == 0 { 1.0 - w[1] } else { w[1] })
                    * (if dc == 0 { 1.0 - w[2] } else { w[2] });
                if weight == 0.0 {
                    continue;
                }
                let inside = (0..3).all(|i| idx[i] >= 0 && (idx[i] as usize) < size[i]);
                if inside {
                    acc += weight
                        * inputs[[ch, idx[0] as usize, idx[1] as usize, idx[2] as usize]] as f64;
                }
            }
        }
    }
    acc as f32
}

fn nearest(target: &Array3<u16>, vox: [f64; 3], size: [usize; 3]) -> u16 {
    let idx: [isize; 3] = std::array::from_fn(|i| vox[i].round() as isize);
    let inside = (0..3).all(|i| idx[i] >= 0 && (idx[i] as usize) < size[i]);
    if inside {
        target[[idx[0] as usize, idx[1] as usize, idx[2] as usize]]
    } else {
        0
    }
}

fn rotation_matrix(angles_rad: [f64; 3]) -> [[f64; 3]; 3] {
    let (s0, c0) = angles_rad[0].sin_cos();
    let (s1, c1) = angles_rad[1].sin_cos();
    let (s2, c2) = angles_rad[2].sin_cos();
    // Rotations about data axes 0, 1, 2 composed as R0 * R1 * R2.
    let r0 = [[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]];
    let r1 = [[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]];
    let r2 = [[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&r0, &r1), &r2)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// Random displacement field from a coarse control grid, trilinearly
/// upsampled to voxel resolution; values in mm.
fn elastic_field(
    cfg: &ElasticCfg,
    size: [usize; 3],
    spacing: [f64; 3],
    rng: &mut ChaCha20Rng,
) -> Array4<f64> {
    let n_ctrl: [usize; 3] = std::array::from_fn(|a| {
        let extent_mm = size[a] as f64 * spacing[a];
        ((extent_mm / cfg.control_spacing_mm).ceil() as usize + 1).max(2)
    });
    let mut ctrl = Array4::<f64>::zeros((3, n_ctrl[0], n_ctrl[1], n_ctrl[2]));
    for v in ctrl.iter_mut() {
        *v = rng.random_range(-cfg.max_displacement_mm..=cfg.max_displacement_mm);
    }
    let mut field = Array4::<f64>::zeros((3, size[0], size[1], size[2]));
    for a in 0..size[0] {
        for b in 0..size[1] {
            for c in 0..size[2] {
                let t: [f64; 3] = std::array::from_fn(|i| {
                    let pos_mm = [a, b, c][i] as f64 * spacing[i];
                    (pos_mm / cfg.control_spacing_mm).min(n_ctrl[i] as f64 - 1.0)
                });
                for axis in 0..3 {
                    let f: [f64; 3] = std::array::from_fn(|i| t[i].floor());
                    let w: [f64; 3] = std::array::from_fn(|i| t[i] - f[i]);
                    let mut acc = 0.0;
                    for da in 0..2usize {
                        for db in 0..2usize {
                            for dc in 0..2usize {
                                let idx: [usize; 3] = [
                                    (f[0] as usize + da).min(n_ctrl[0] - 1),
                                    (f[1] as usize + db).min(n_ctrl[1] - 1),
                                    (f[2] as usize + dc).min(n_ctrl[2] - 1),
                                ];
                                let weight = (if da == 0 { 1.0 - w[0] } else { w[0] })
                                    * (if db == 0 { 1.0 - w[1] } else { w[1] })
                                    * (if dc == 0 { 1.0 - w[2] } else { w[2] });
                                acc += weight * ctrl[[axis, idx[0], idx[1], idx[2]]];
                            }
                        }
                    }
                    field[[axis, a, b, c]] = acc;
                }
            }
        }
    }
    field
}

/// Multiplicative polynomial bias field of the given order, scaled so the
/// peak magnitude equals `amplitude`.
fn bias_field(
    cfg: &BiasFieldCfg,
    size: [usize; 3],
    rng: &mut ChaCha20Rng,
) -> Array3<f64> {
    // Random coefficients for monomials u^i v^j w^k with i+j+k <= order.
    let mut terms = Vec::new();
    for i in 0..=cfg.order {
        for j in 0..=(cfg.order - i) {
            for k in 0..=(cfg.order - i - j) {
                if i + j + k == 0 {
                    continue; // constant offset is not a field
                }
                terms.push((i, j, k, rng.random_range(-1.0..1.0)));
            }
        }
    }
    let norm = |a: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            2.0 * a as f64 / (n as f64 - 1.0) - 1.0
        }
    };
    let mut field = Array3::<f64>::zeros((size[0], size[1], size[2]));
    let mut peak = 0.0f64;
    for ((a, b, c), v) in field.indexed_iter_mut() {
        let (u, vv, w) = (norm(a, size[0]), norm(b, size[1]), norm(c, size[2]));
        let mut acc = 0.0;
        for &(i, j, k, coef) in &terms {
            acc += coef * u.powi(i as i32) * vv.powi(j as i32) * w.powi(k as i32);
        }
        *v = acc;
        peak = peak.max(acc.abs());
    }
    if peak > 0.0 {
        let scale = cfg.amplitude / peak;
        field.mapv_inplace(|v| v * scale);
    }
    field
}

/// Apply the configured augmentations. Spatial transforms run first (one
/// combined resample), then bias field, multiplicative and additive noise,
/// and motion ghosts. All transforms disabled is the exact identity.
pub fn augment(p: &Patch, cfg: &AugmentConfig) -> Result<Patch> {
    cfg.validate()?;
    p.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let size = p.spatial_shape();

    let mut out = if cfg.rotation.is_some() || cfg.elastic.is_some() {
        let rot = match &cfg.rotation {
            Some(r) => {
                let angles: [f64; 3] = std::array::from_fn(|a| {
                    let max = r.max_degrees[a];
                    if max == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-max..=max).to_radians()
                    }
                });
                rotation_matrix(angles)
            }
            None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        let disp = cfg
            .elastic
            .as_ref()
            .map(|e| elastic_field(e, size, p.spacing, &mut rng));
        spatial_transform(p, &rot, disp.as_ref())
    } else {
        p.clone()
    };

    let channels = out.inputs.shape()[0];

    if let Some(b) = &cfg.bias_field {
        for ci in 0..channels {
            let field = bias_field(b, size, &mut rng);
            let mut ch = out.inputs.index_axis_mut(ndarray::Axis(0), ci);
            for (x, f) in ch.iter_mut().zip(field.iter()) {
                *x = (*x as f64 * (1.0 + f)) as f32;
            }
        }
    }

    if let Some((lo, hi)) = cfg.multiplicative_noise {
        for ci in 0..channels {
            let factor = rng.random_range(lo..=hi);
            let mut ch = out.inputs.index_axis_mut(ndarray::Axis(0), ci);
            for x in ch.iter_mut() {
                *x = (*x as f64 * factor) as f32;
            }
        }
    }

    if let Some((lo, hi)) = cfg.additive_noise {
        for ci in 0..channels {
            let rel_sigma = rng.random_range(lo..=hi);
            let ch_view = out.inputs.index_axis(ndarray::Axis(0), ci);
            let n = ch_view.len() as f64;
            let mean: f64 = ch_view.iter().map(|&x| x as f64).sum::<f64>() / n;
            let sd = (ch_view.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            let sigma = rel_sigma * sd;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).unwrap();
                let mut ch = out.inputs.index_axis_mut(ndarray::Axis(0), ci);
                for x in ch.iter_mut() {
                    *x = (*x as f64 + normal.sample(&mut rng)) as f32;
                }
            }
        }
    }

    if let Some(m) = &cfg.motion {
        for ci in 0..channels {
            let ghosts = rng.random_range(0..=m.max_ghosts);
            if ghosts == 0 {
                continue;
            }
            let base = out.inputs.index_axis(ndarray::Axis(0), ci).to_owned();
            for _ in 0..ghosts {
                let axis = rng.random_range(0..3usize);
                let max_shift = (size[axis] / 4).max(1);
                let shift = rng.random_range(1..=max_shift);
                let alpha = m.intensity * rng.random_range(0.5..=1.0);
                let mut ch = out.inputs.index_axis_mut(ndarray::Axis(0), ci);
                // Circular ghost echo along the chosen axis.
                for a in 0..size[0] {
                    for b in 0..size[1] {
                        for c in 0..size[2] {
                            let mut src = [a, b, c];
                            src[axis] = (src[axis] + shift) % size[axis];
                            let add = alpha * base[[src[0], src[1], src[2]]] as f64;
                            ch[[a, b, c]] = (ch[[a, b, c]] as f64 + add) as f32;
                        }
                    }
                }
            }
        }
    }

    Ok(out)
}

/// Worker seed derivation: a fixed mix of base seed, epoch and item index so
/// parallel patch production is reproducible and worker-count independent.
pub fn derive_seed(base: u64, epoch: u64, item: u64) -> u64 {
    let mut z = base
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(item.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use ndarray::{Array3, Array4};
    use rand::Rng;

    fn demo_patch(n: usize) -> Patch {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let inputs = Array4::from_shape_fn((1, n, n, n), |_| rng.random_range(0.0f32..2.0));
        let target = Array3::from_shape_fn((n, n, n), |_| rng.random_range(0..3u16));
        Patch { inputs, target, channel_tags: vec![Modality::Flair], spacing: [1.0; 3] }
    }

    #[test]
    fn disabled_config_is_identity() {
        let p = demo_patch(8);
        let out = augment(&p, &AugmentConfig::disabled(5)).unwrap();
        assert_eq!(out.target, p.target);
        assert!(out
            .inputs
            .iter()
            .zip(p.inputs.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn same_seed_bit_identical_different_seed_differs() {
        let p = demo_patch(10);
        let cfg = AugmentConfig { seed: 7, ..Default::default() };
        let a = augment(&p, &cfg).unwrap();
        let b = augment(&p, &cfg).unwrap();
        assert!(a
            .inputs
            .iter()
            .zip(b.inputs.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.target, b.target);
        let c = augment(&p, &AugmentConfig { seed: 8, ..Default::default() }).unwrap();
        assert!(a.inputs.iter().zip(c.inputs.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn ninety_degree_rotation_equals_axis_permutation() {
        let p = demo_patch(9);
        // +90 degrees about data axis 0 rotates the (1,2) plane.
        let rot = rotation_matrix([std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let out = spatial_transform(&p, &rot, None);
        let n = 9usize;
        // Oracle: direct array permutation out[a,b,c] = in[a, c, n-1-b].
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let want = p.inputs[[0, a, c, n - 1 - b]];
                    let got = out.inputs[[0, a, b, c]];
                    assert!(
                        (want - got).abs() < 1e-4,
                        "({a},{b},{c}): want {want} got {got}"
                    );
                    assert_eq!(out.target[[a, b, c]], p.target[[a, c, n - 1 - b]]);
                }
            }
        }
    }

    #[test]
    fn intensity_transforms_leave_target_untouched() {
        let p = demo_patch(8);
        let cfg = AugmentConfig {
            rotation: None,
            elastic: None,
            seed: 3,
            ..Default::default()
        };
        let out = augment(&p, &cfg).unwrap();
        assert_eq!(out.target, p.target);
        assert!(out.inputs.iter().zip(p.inputs.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn spatial_transforms_never_invent_label_ids() {
        let p = demo_patch(12);
        let present: std::collections::BTreeSet<u16> = p.target.iter().copied().collect();
        for seed in 0..10 {
            let cfg = AugmentConfig { seed, ..Default::default() };
            let out = augment(&p, &cfg).unwrap();
            for &t in out.target.iter() {
                assert!(t == 0 || present.contains(&t), "new label {t}");
            }
        }
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let p = demo_patch(10);
        let cfg = AugmentConfig { seed: 1, ..Default::default() };
        let out = augment(&p, &cfg).unwrap();
        assert_eq!(out.inputs.shape(), p.inputs.shape());
        assert_eq!(out.target.shape(), p.target.shape());
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(1, 0, 0);
        let b = derive_seed(1, 0, 1);
        let c = derive_seed(1, 1, 0);
        let d = derive_seed(2, 0, 0);
        let set: std::collections::BTreeSet<u64> = [a, b, c, d].into_iter().collect();
        assert_eq!(set.len(), 4);
        assert_eq!(derive_seed(1, 0, 0), a);
    }
}
