//! Full-volume prediction: sliding-window stitching with Gaussian-weighted
//! blending, softmax-average fusion of per-modality predictions, and
//! voxel-wise argmax labeling.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ChannelTag, ModelBundle};
use crate::normalize::normalize_nonzero;
use crate::volume::{Affine, LabelMap, LabelVocabulary, Modality, TaskKind, Volume, ALIGN_TOL};

/// Per-voxel class-probability field on a volume grid.
#[derive(Debug, Clone)]
pub struct ProbVolume {
    /// (classes, d0, d1, d2)
    pub probs: Array4<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub task: TaskKind,
}

impl ProbVolume {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("probabilities outside [0, 1]".into()));
        }
        let c = self.num_classes();
        let v = self.probs.len() / c;
        let ps = self.probs.as_slice().expect("contiguous probs");
        for vi in 0..v {
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ps[ci * v + vi] as f64;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::Data(format!(
                    "per-voxel probabilities sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

fn check_volumes_aligned(vols: &[&Volume]) -> Result<()> {
    let first = vols[0];
    for (i, v) in vols.iter().enumerate().skip(1) {
        if v.shape() != first.shape() {
            return Err(Error::Alignment(format!(
                "input volume {i} shape {:?} differs from first {:?}",
                v.shape(),
                first.shape()
            )));
        }
        let ok = v
            .spacing
            .iter()
            .zip(first.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= ALIGN_TOL);
        if !ok {
            return Err(Error::Alignment("input volume spacings differ".into()));
        }
    }
    Ok(())
}

/// Window origins along one axis: stride = window * (1 - overlap), with the
/// final window snapped to the far border so every voxel is covered.
pub fn window_origins(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    debug_assert!(dim >= window);
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        origins.push(o.min(dim - window));
        if o + window >= dim {
            break;
        }
        o += stride;
    }
    origins.dedup();
    origins
}

/// Separable Gaussian window weights, sigma = window / 8 per axis.
fn gaussian_weights(window: [usize; 3]) -> Array3<f32> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = (n as f64 / 8.0).max(1e-6);
        (0..n)
            .map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp())
            .collect()
    };
    let (wa, wb, wc) = (axis(window[0]), axis(window[1]), axis(window[2]));
    Array3::from_shape_fn((window[0], window[1], window[2]), |(a, b, c)| {
        (wa[a] * wb[b] * wc[c]) as f32
    })
}

/// Sliding-window full-volume prediction.
///
/// Inputs are z-scored (nonzero-masked) to match training, windows of
/// `window` voxels are predicted with softmax and blended with a
/// center-weighted Gaussian, and the result is renormalized per voxel.
/// Volumes smaller than the window are padded, predicted and cropped.
pub fn predict_volume(
    bundle: &ModelBundle,
    inputs: &[&Volume],
    window: [usize; 3],
    overlap: f64,
) -> Result<ProbVolume> {
    if inputs.len() != bundle.config.in_channels {
        return Err(Error::Shape(format!(
            "{} input volumes for a {}-channel model",
            inputs.len(),
            bundle.config.in_channels
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let div = 1usize << (bundle.config.depth - 1);
    if window.iter().any(|&w| w == 0 || w % div != 0) {
        return Err(Error::Shape(format!(
            "window {window:?} not divisible by 2^(depth-1) = {div}"
        )));
    }
    check_volumes_aligned(inputs)?;

    let grid = inputs[0].shape();
    let spacing = inputs[0].spacing;
    let affine = inputs[0].affine;

    // Normalize, then pad to at least the window size (pad-predict-crop).
    let padded: [usize; 3] = std::array::from_fn(|a| grid[a].max(window[a]));
    let needs_pad = padded != grid;
    let channels: Vec<Array3<f32>> = inputs
        .iter()
        .map(|v| {
            let n = normalize_nonzero(v);
            if needs_pad {
                let mut big = Array3::<f32>::zeros((padded[0], padded[1], padded[2]));
                big.slice_mut(ndarray::s![..grid[0], ..grid[1], ..grid[2]])
                    .assign(&n.data);
                big
            } else {
                n.data
            }
        })
        .collect();

    let origins: Vec<[usize; 3]> = {
        let oa = window_origins(padded[0], window[0], overlap);
        let ob = window_origins(padded[1], window[1], overlap);
        let oc = window_origins(padded[2], window[2], overlap);
        let mut all = Vec::with_capacity(oa.len() * ob.len() * oc.len());
        for &a in &oa {
            for &b in &ob {
                for &c in &oc {
                    all.push([a, b, c]);
                }
            }
        }
        all
    };

    let probs = stitch_windows(bundle, &channels, padded, window, &origins)?;

    let probs = if needs_pad {
        probs
            .slice(ndarray::s![.., ..grid[0], ..grid[1], ..grid[2]])
            .to_owned()
    } else {
        probs
    };

    Ok(ProbVolume { probs, spacing, affine, task: bundle.task })
}

/// Predict every window (in parallel) and blend in list order.
///
/// Blending is a commutative weighted sum, so the result is independent of
/// window traversal order up to float reassociation. The origin list is a
/// public knob so schedulers (and tests) can reorder traversal.
pub fn stitch_windows(
    bundle: &ModelBundle,
    channels: &[Array3<f32>],
    grid: [usize; 3],
    window: [usize; 3],
    origins: &[[usize; 3]],
) -> Result<Array4<f32>> {
    let classes = bundle.config.num_classes;
    let weights = gaussian_weights(window);

    let results: Vec<(usize, Array4<f32>)> = origins
        .par_iter()
        .enumerate()
        .map(|(i, &o)| -> Result<(usize, Array4<f32>)> {
            let mut x = Array4::<f32>::zeros((channels.len(), window[0], window[1], window[2]));
            for (ci, ch) in channels.iter().enumerate() {
                x.index_axis_mut(Axis(0), ci).assign(&ch.slice(ndarray::s![
                    o[0]..o[0] + window[0],
                    o[1]..o[1] + window[1],
                    o[2]..o[2] + window[2]
                ]));
            }
            let logits = bundle.net.forward_item_no_tape(x.view())?;
            Ok((i, crate::loss::softmax_item(&logits)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = Array4::<f32>::zeros((classes, grid[0], grid[1], grid[2]));
    let mut wsum = Array3::<f32>::zeros((grid[0], grid[1], grid[2]));
    for (i, probs) in &results {
        let o = origins[*i];
        for ci in 0..classes {
            let mut dst = acc.index_axis_mut(Axis(0), ci);
            let mut dst = dst.slice_mut(ndarray::s![
                o[0]..o[0] + window[0],
                o[1]..o[1] + window[1],
                o[2]..o[2] + window[2]
            ]);
            let src = probs.index_axis(Axis(0), ci);
            ndarray::Zip::from(&mut dst)
                .and(&src)
                .and(&weights)
                .for_each(|d, &p, &w| *d += p * w);
        }
        let mut wdst = wsum.slice_mut(ndarray::s![
            o[0]..o[0] + window[0],
            o[1]..o[1] + window[1],
            o[2]..o[2] + window[2]
        ]);
        wdst += &weights;
    }

    // Divide by blended weight, then renormalize per voxel.
    for ci in 0..classes {
        let mut ch = acc.index_axis_mut(Axis(0), ci);
        ndarray::Zip::from(&mut ch).and(&wsum).for_each(|a, &w| *a /= w);
    }
    let v = grid[0] * grid[1] * grid[2];
    {
        let ps = acc.as_slice_mut().unwrap();
        for vi in 0..v {
            let mut sum = 0.0f32;
            for ci in 0..classes {
                sum += ps[ci * v + vi];
            }
            if sum > 0.0 {
                for ci in 0..classes {
                    ps[ci * v + vi] /= sum;
                }
            }
        }
    }
    Ok(acc)
}

/// Voxel-wise arithmetic mean of two probability fields.
pub fn fuse_softmax(a: &ProbVolume, b: &ProbVolume) -> Result<ProbVolume> {
    if a.task != b.task || a.num_classes() != b.num_classes() {
        return Err(Error::Fusion(format!(
            "class vocabularies differ ({} {} classes vs {} {})",
            a.task,
            a.num_classes(),
            b.task,
            b.num_classes()
        )));
    }
    if a.grid_shape() != b.grid_shape() {
        return Err(Error::Fusion(format!(
            "grids differ ({:?} vs {:?})",
            a.grid_shape(),
            b.grid_shape()
        )));
    }
    let probs = (&a.probs + &b.probs) / 2.0f32;
    Ok(ProbVolume { probs, spacing: a.spacing, affine: a.affine, task: a.task })
}

fn vocabulary_for(task: TaskKind) -> LabelVocabulary {
    match task {
        TaskKind::Lesion => LabelVocabulary::lesion(),
        TaskKind::Region | TaskKind::Joint => LabelVocabulary::regions(34),
    }
}

/// Per-voxel argmax; ties break to the smallest class index.
pub fn argmax_labels(p: &ProbVolume) -> LabelMap {
    let c = p.num_classes();
    let grid = p.grid_shape();
    let v = grid[0] * grid[1] * grid[2];
    let ps = p.probs.as_slice().expect("contiguous probs");
    let mut labels = Array3::<u16>::zeros((grid[0], grid[1], grid[2]));
    {
        let ls = labels.as_slice_mut().unwrap();
        for vi in 0..v {
            let mut best = 0usize;
            let mut best_p = ps[vi];
            for ci in 1..c {
                let pv = ps[ci * v + vi];
                if pv > best_p {
                    best_p = pv;
                    best = ci;
                }
            }
            ls[vi] = best as u16;
        }
    }
    LabelMap {
        data: labels,
        spacing: p.spacing,
        affine: p.affine,
        vocabulary: vocabulary_for(p.task),
    }
}

/// Inputs to a fused prediction across the configuration matrix.
pub struct EnsembleRequest<'a> {
    pub bundles: Vec<&'a ModelBundle>,
    pub volumes: BTreeMap<Modality, &'a Volume>,
    /// Permit single-modality inference for interchangeable models.
    pub allow_missing: bool,
    pub window: [usize; 3],
    pub overlap: f64,
}

/// Fused full-volume prediction.
///
/// One two-channel bundle runs the concatenated path; two single-channel
/// bundles form the unimodal-pair ensemble (softmax averaging); one
/// interchangeable bundle is applied to each available modality and fused,
/// or to a single modality when `allow_missing` is set.
pub fn ensemble_predict(req: &EnsembleRequest) -> Result<LabelMap> {
    match req.bundles.len() {
        1 => {
            let bundle = req.bundles[0];
            match bundle.channel_tags.as_slice() {
                [ChannelTag::T1, ChannelTag::Flair] => {
                    let (Some(t1), Some(flair)) = (
                        req.volumes.get(&Modality::T1),
                        req.volumes.get(&Modality::Flair),
                    ) else {
                        return Err(Error::Shape(
                            "concatenated model needs both t1 and flair inputs".into(),
                        ));
                    };
                    bundle.check_modalities(&[Modality::T1, Modality::Flair])?;
                    let p = predict_volume(bundle, &[t1, flair], req.window, req.overlap)?;
                    Ok(argmax_labels(&p))
                }
                [ChannelTag::Any] => {
                    let mut preds = Vec::new();
                    for m in [Modality::T1, Modality::Flair] {
                        if let Some(v) = req.volumes.get(&m) {
                            preds.push(predict_volume(bundle, &[v], req.window, req.overlap)?);
                        }
                    }
                    match preds.len() {
                        0 => Err(Error::Config(
                            "no input modality supplied for interchangeable model".into(),
                        )),
                        1 => {
                            if !req.allow_missing {
                                return Err(Error::Config(
                                    "one modality missing; pass allow_missing to run \
                                     single-modality inference"
                                        .into(),
                                ));
                            }
                            Ok(argmax_labels(&preds[0]))
                        }
                        _ => Ok(argmax_labels(&fuse_softmax(&preds[0], &preds[1])?)),
                    }
                }
                [single] => {
                    // Unimodal model used alone (matrix cells A/FLAIR, B/T1).
                    let m = match single {
                        ChannelTag::T1 => Modality::T1,
                        ChannelTag::Flair => Modality::Flair,
                        ChannelTag::Any => unreachable!(),
                    };
                    let Some(v) = req.volumes.get(&m) else {
                        return Err(Error::Config(format!(
                            "model requires modality {m} which was not supplied"
                        )));
                    };
                    let p = predict_volume(bundle, &[v], req.window, req.overlap)?;
                    Ok(argmax_labels(&p))
                }
                other => Err(Error::Config(format!(
                    "unsupported channel tag layout {other:?}"
                ))),
            }
        }
        2 => {
            // Unimodal pair: one FLAIR-trained and one T1-trained bundle.
            let mut flair_bundle = None;
            let mut t1_bundle = None;
            for b in &req.bundles {
                match b.channel_tags.as_slice() {
                    [ChannelTag::Flair] => flair_bundle = Some(*b),
                    [ChannelTag::T1] => t1_bundle = Some(*b),
                    other => {
                        return Err(Error::Config(format!(
                            "pair fusion needs single-modality bundles, got tags {other:?}"
                        )))
                    }
                }
            }
            let (Some(fb), Some(tb)) = (flair_bundle, t1_bundle) else {
                return Err(Error::Config(
                    "pair fusion needs one flair-trained and one t1-trained bundle".into(),
                ));
            };
            if fb.task != tb.task {
                return Err(Error::Fusion("bundles predict different tasks".into()));
            }
            let (Some(t1), Some(flair)) = (
                req.volumes.get(&Modality::T1),
                req.volumes.get(&Modality::Flair),
            ) else {
                return Err(Error::Config(
                    "pair fusion needs both t1 and flair volumes".into(),
                ));
            };
            let pf = predict_volume(fb, &[flair], req.window, req.overlap)?;
            let pt = predict_volume(tb, &[t1], req.window, req.overlap)?;
            Ok(argmax_labels(&fuse_softmax(&pt, &pf)?))
        }
        n => Err(Error::Config(format!(
            "ensemble takes 1 or 2 bundles, got {n}"
        ))),
    }
}
