//! Patch extraction and training-item construction for the four input
//! configurations.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::labels;
use crate::volume::{InputConfig, Modality, Sample, TaskKind};

/// One training patch: stacked input channels plus the class-id target.
#[derive(Debug, Clone)]
pub struct Patch {
    /// (channels, d0, d1, d2)
    pub inputs: Array4<f32>,
    /// (d0, d1, d2) class ids.
    pub target: Array3<u16>,
    /// Modality of each input channel, in channel order.
    pub channel_tags: Vec<Modality>,
    /// Voxel spacing in mm (needed by mm-calibrated augmentation).
    pub spacing: [f64; 3],
}

impl Patch {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.inputs.shape();
        if [s[1], s[2], s[3]] != *self.target.shape().first_chunk::<3>().unwrap() {
            return Err(Error::Shape(
                "patch input and target spatial shapes differ".into(),
            ));
        }
        if !(1..=2).contains(&s[0]) || s[0] != self.channel_tags.len() {
            return Err(Error::Shape(format!(
                "patch must have 1 or 2 tagged channels, got {} channels / {} tags",
                s[0],
                self.channel_tags.len()
            )));
        }
        if self.channel_tags.len() == 2 && self.channel_tags[0] == self.channel_tags[1] {
            return Err(Error::Shape("duplicate channel tags".into()));
        }
        Ok(())
    }
}

/// One entry of the training set: which sample and which input channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingItem {
    pub sample_index: usize,
    pub channels: Vec<Modality>,
}

/// Expand samples into training items for an input configuration.
///
/// FLAIR_ONLY / T1_ONLY give one single-channel item per subject; CONCAT one
/// two-channel item (fixed order T1, FLAIR); INTERCHANGEABLE two
/// single-channel items per subject, doubling the item count.
pub fn build_training_items(
    samples: &[Sample],
    cfg: InputConfig,
    _task: TaskKind,
) -> Result<Vec<TrainingItem>> {
    let mut missing: Vec<String> = Vec::new();
    for s in samples {
        for &m in cfg.required_modalities() {
            if s.modality(m).is_none() {
                missing.push(format!("{} (missing {m})", s.subject_id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "input config {cfg} requires modalities not present for: {}",
            missing.join(", ")
        )));
    }

    let mut items = Vec::new();
    for (i, _) in samples.iter().enumerate() {
        match cfg {
            InputConfig::FlairOnly => items.push(TrainingItem {
                sample_index: i,
                channels: vec![Modality::Flair],
            }),
            InputConfig::T1Only => items.push(TrainingItem {
                sample_index: i,
                channels: vec![Modality::T1],
            }),
            InputConfig::Concat => items.push(TrainingItem {
                sample_index: i,
                channels: vec![Modality::T1, Modality::Flair],
            }),
            InputConfig::Interchangeable => {
                items.push(TrainingItem { sample_index: i, channels: vec![Modality::T1] });
                items.push(TrainingItem { sample_index: i, channels: vec![Modality::Flair] });
            }
        }
    }
    Ok(items)
}

/// The full-volume target grid for a task.
pub fn target_field(s: &Sample, task: TaskKind) -> Result<Array3<u16>> {
    let need = |o: &Option<crate::volume::LabelMap>, what: &str| -> Result<()> {
        if o.is_none() {
            Err(Error::Config(format!(
                "subject {} has no {what} labels required by task {task}",
                s.subject_id
            )))
        } else {
            Ok(())
        }
    };
    match task {
        TaskKind::Lesion => {
            need(&s.lesion, "lesion")?;
            Ok(s.lesion.as_ref().unwrap().data.clone())
        }
        TaskKind::Region => {
            need(&s.regions, "region")?;
            Ok(s.regions.as_ref().unwrap().data.clone())
        }
        TaskKind::Joint => {
            need(&s.lesion, "lesion")?;
            need(&s.regions, "region")?;
            let joint =
                labels::make_regional(s.lesion.as_ref().unwrap(), s.regions.as_ref().unwrap())?;
            Ok(joint.data)
        }
    }
}

/// Extract one training patch.
///
/// With probability `fg_bias` the patch center is a foreground voxel of the
/// target (uniform over foreground; falls back to a uniform voxel when the
/// target is empty), otherwise a uniform voxel. Border patches are
/// zero-padded. Deterministic given the seed.
pub fn sample_patch(
    s: &Sample,
    task: TaskKind,
    channels: &[Modality],
    size: [usize; 3],
    fg_bias: f64,
    seed: u64,
) -> Result<Patch> {
    for &m in channels {
        if s.modality(m).is_none() {
            return Err(Error::Config(format!(
                "subject {} is missing modality {m}",
                s.subject_id
            )));
        }
    }
    let target_full = target_field(s, task)?;
    let grid = s.grid_shape().ok_or_else(|| {
        Error::Config(format!("subject {} has no modalities", s.subject_id))
    })?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let center = if rng.random::<f64>() < fg_bias {
        let fg: Vec<[usize; 3]> = target_full
            .indexed_iter()
            .filter(|(_, &t)| t != 0)
            .map(|((a, b, c), _)| [a, b, c])
            .collect();
        if fg.is_empty() {
            uniform_voxel(&mut rng, grid)
        } else {
            fg[rng.random_range(0..fg.len())]
        }
    } else {
        uniform_voxel(&mut rng, grid)
    };

    let start: [isize; 3] = std::array::from_fn(|a| center[a] as isize - (size[a] / 2) as isize);

    let mut inputs = Array4::<f32>::zeros((channels.len(), size[0], size[1], size[2]));
    for (ci, &m) in channels.iter().enumerate() {
        let vol = &s.modality(m).unwrap().data;
        let mut ch = inputs.index_axis_mut(ndarray::Axis(0), ci);
        copy_window(&mut ch, vol, start, grid);
    }
    let mut target = Array3::<u16>::zeros((size[0], size[1], size[2]));
    {
        let mut view = target.view_mut();
        copy_window(&mut view, &target_full, start, grid);
    }

    let spacing = s.modality(channels[0]).unwrap().spacing;
    let p = Patch { inputs, target, channel_tags: channels.to_vec(), spacing };
    p.validate()?;
    Ok(p)
}

fn uniform_voxel(rng: &mut ChaCha20Rng, grid: [usize; 3]) -> [usize; 3] {
    [
        rng.random_range(0..grid[0]),
        rng.random_range(0..grid[1]),
        rng.random_range(0..grid[2]),
    ]
}

fn copy_window<T: Copy + num_traits::Zero>(
    out: &mut ndarray::ArrayViewMut3<T>,
    src: &Array3<T>,
    start: [isize; 3],
    grid: [usize; 3],
) {
    let size = out.shape().to_vec();
    for a in 0..size[0] {
        let sa = start[0] + a as isize;
        if sa < 0 || sa >= grid[0] as isize {
            continue;
        }
        for b in 0..size[1] {
            let sb = start[1] + b as isize;
            if sb < 0 || sb >= grid[1] as isize {
                continue;
            }
            for c in 0..size[2] {
                let sc = start[2] + c as isize;
                if sc < 0 || sc >= grid[2] as isize {
                    continue;
                }
                out[[a, b, c]] = src[[sa as usize, sb as usize, sc as usize]];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use ndarray::Array3;

    fn phantom(seed: u64) -> Sample {
        generate_phantom(&PhantomSpec { seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn forced_foreground_center_hits_single_lesion_voxel() {
        let mut s = phantom(1);
        // Replace the lesion mask with exactly one voxel.
        let lesion = s.lesion.as_mut().unwrap();
        lesion.data.fill(0);
        lesion.data[[20, 25, 30]] = 1;
        let p = sample_patch(&s, TaskKind::Lesion, &[Modality::Flair], [16, 16, 16], 1.0, 9)
            .unwrap();
        assert_eq!(p.target.iter().filter(|&&t| t != 0).count(), 1);
        // The forced center is inside the patch: it IS the patch center.
        assert_eq!(p.target[[8, 8, 8]], 1);
    }

    #[test]
    fn empty_target_with_zero_bias_is_allowed() {
        let mut s = phantom(2);
        s.lesion.as_mut().unwrap().data.fill(0);
        let p = sample_patch(&s, TaskKind::Lesion, &[Modality::Flair], [16, 16, 16], 0.0, 1)
            .unwrap();
        assert!(p.target.iter().all(|&t| t == 0));
    }

    #[test]
    fn foreground_fraction_tracks_bias() {
        // Monte Carlo oracle: count forced-foreground draws over many seeds.
        let s = phantom(3);
        let n = 10_000;
        let mut fg_centered = 0usize;
        for seed in 0..n {
            let p = sample_patch(&s, TaskKind::Lesion, &[Modality::Flair], [8, 8, 8], 0.5, seed)
                .unwrap();
            if p.target[[4, 4, 4]] != 0 {
                fg_centered += 1;
            }
        }
        let frac = fg_centered as f64 / n as f64;
        // Uniform draws also occasionally land on a lesion voxel, so the
        // expected fraction is 0.5 + 0.5 * lesion_fraction (tiny).
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn border_patches_are_zero_padded() {
        let mut s = phantom(4);
        let lesion = s.lesion.as_mut().unwrap();
        lesion.data.fill(0);
        lesion.data[[0, 0, 0]] = 1;
        let p = sample_patch(&s, TaskKind::Lesion, &[Modality::Flair], [16, 16, 16], 1.0, 5)
            .unwrap();
        // The window is centered on the corner, so the out-of-volume half
        // must be exactly zero.
        for a in 0..8 {
            for b in 0..8 {
                for c in 0..8 {
                    assert_eq!(p.inputs[[0, a, b, c]], 0.0);
                }
            }
        }
        assert_eq!(p.target[[8, 8, 8]], 1);
    }

    #[test]
    fn same_seed_same_patch() {
        let s = phantom(5);
        let a = sample_patch(&s, TaskKind::Joint, &[Modality::T1], [16, 16, 16], 0.7, 33).unwrap();
        let b = sample_patch(&s, TaskKind::Joint, &[Modality::T1], [16, 16, 16], 0.7, 33).unwrap();
        assert_eq!(a.target, b.target);
        assert!(a
            .inputs
            .iter()
            .zip(b.inputs.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_patch(&s, TaskKind::Joint, &[Modality::T1], [16, 16, 16], 0.7, 34).unwrap();
        assert!(a.inputs.iter().zip(c.inputs.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn cardinalities_per_config() {
        let samples: Vec<Sample> = (0..5).map(phantom).collect();
        let concat =
            build_training_items(&samples, InputConfig::Concat, TaskKind::Lesion).unwrap();
        assert_eq!(concat.len(), 5);
        assert!(concat
            .iter()
            .all(|i| i.channels == vec![Modality::T1, Modality::Flair]));

        let inter =
            build_training_items(&samples, InputConfig::Interchangeable, TaskKind::Lesion)
                .unwrap();
        assert_eq!(inter.len(), 10);
        // Each subject covered exactly twice, once per modality.
        for i in 0..5 {
            let per: Vec<_> = inter.iter().filter(|it| it.sample_index == i).collect();
            assert_eq!(per.len(), 2);
            assert!(per.iter().any(|it| it.channels == vec![Modality::T1]));
            assert!(per.iter().any(|it| it.channels == vec![Modality::Flair]));
        }
    }

    #[test]
    fn missing_modality_names_the_subject() {
        let mut samples: Vec<Sample> = (0..3).map(phantom).collect();
        samples[1].modalities.remove(&Modality::T1);
        samples[1].subject_id = "broken_subject".into();
        let err =
            build_training_items(&samples, InputConfig::T1Only, TaskKind::Lesion).unwrap_err();
        assert!(err.to_string().contains("broken_subject"), "{err}");
    }

    #[test]
    fn joint_target_uses_regional_labels() {
        let s = phantom(6);
        let p = sample_patch(&s, TaskKind::Joint, &[Modality::Flair], [48, 48, 48], 1.0, 2)
            .unwrap();
        // Joint targets carry region ids (> 1 somewhere), never just 0/1.
        assert!(p.target.iter().any(|&t| t > 1) || p.target.iter().all(|&t| t == 0));
    }

    #[test]
    fn patch_validation_catches_bad_shapes() {
        let p = Patch {
            inputs: Array4::zeros((1, 4, 4, 4)),
            target: Array3::zeros((4, 4, 5)),
            channel_tags: vec![Modality::T1],
            spacing: [1.0; 3],
        };
        assert!(p.validate().is_err());
    }
}
