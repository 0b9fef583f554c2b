//! Training loop: Nesterov-momentum SGD on the composite loss over
//! augmented patches, across the four input configurations.
//!
//! Batch items run in parallel workers; per-item gradients are reduced in
//! item order, so results do not depend on the worker count. Every random
//! draw derives from the config seed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, derive_seed, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::infer::{ensemble_predict, EnsembleRequest};
use crate::loss::{composite_loss_grad_item, LossWeights};
use crate::model::{channel_tags_for, init_model, ModelBundle, ModelConfig, TrainProvenance};
use crate::nn::Gradients;
use crate::normalize::normalize_nonzero;
use crate::optim::NesterovSgd;
use crate::patch::{build_training_items, sample_patch, TrainingItem};
use crate::volume::{InputConfig, Modality, Sample, TaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_config: InputConfig,
    pub task: TaskKind,
    /// Fixed learning rate (the schedule hook defaults to constant).
    pub lr: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub epochs: usize,
    /// Cap on mini-batches per epoch.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Patch size in voxels, data-axis order.
    pub patch_size: [usize; 3],
    pub loss_weights: LossWeights,
    /// Probability that a patch is centered on a foreground voxel.
    pub fg_bias: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Evaluate the validation split every N epochs (0 = never).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_config: InputConfig::Concat,
            task: TaskKind::Lesion,
            lr: 0.001,
            momentum: 0.9,
            epochs: 1000,
            batches_per_epoch: 250,
            batch_size: 12,
            patch_size: [32, 128, 128],
            loss_weights: LossWeights::default(),
            fg_bias: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::Config("fg_bias must be in [0, 1]".into()));
        }
        self.loss_weights.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub ce: Vec<f64>,
    pub ds: Vec<f64>,
    /// Validation Dice when a split was supplied and due this epoch.
    pub val_dice: Vec<Option<f64>>,
    /// Training items after input-configuration expansion.
    pub num_items: usize,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss.last().copied()
    }

    /// CSV: epoch, loss, ce, ds, val_dice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,ce,ds,val_dice\n");
        for e in 0..self.loss.len() {
            let val = self.val_dice[e]
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                e + 1,
                self.loss[e],
                self.ce[e],
                self.ds[e],
                val
            ));
        }
        out
    }
}

/// Normalized copy of a sample (z-score over nonzero voxels, per modality).
fn normalize_sample(s: &Sample) -> Sample {
    let modalities = s
        .modalities
        .iter()
        .map(|(&m, v)| (m, normalize_nonzero(v)))
        .collect();
    Sample {
        subject_id: s.subject_id.clone(),
        modalities,
        lesion: s.lesion.clone(),
        regions: s.regions.clone(),
    }
}

/// Validation Dice for the config's natural inference path.
fn validation_dice(
    bundle: &ModelBundle,
    val: &[Sample],
    tc: &TrainConfig,
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for s in val {
        let mut volumes: BTreeMap<Modality, &crate::volume::Volume> = BTreeMap::new();
        for (&m, v) in &s.modalities {
            volumes.insert(m, v);
        }
        let pred = ensemble_predict(&EnsembleRequest {
            bundles: vec![bundle],
            volumes,
            allow_missing: false,
            window: tc.patch_size,
            overlap: 0.5,
        })?;
        let score = match tc.task {
            TaskKind::Lesion => {
                let gt = s.lesion.as_ref().ok_or_else(|| {
                    Error::Config(format!("validation subject {} lacks lesion", s.subject_id))
                })?;
                eval::dice(&pred, gt)?
            }
            TaskKind::Region => {
                let gt = s.regions.as_ref().ok_or_else(|| {
                    Error::Config(format!("validation subject {} lacks regions", s.subject_id))
                })?;
                eval::mean_dice_regions(&pred, gt)?.mean.unwrap_or(0.0)
            }
            TaskKind::Joint => {
                let lesion = s.lesion.as_ref().ok_or_else(|| {
                    Error::Config(format!("validation subject {} lacks lesion", s.subject_id))
                })?;
                let regions = s.regions.as_ref().ok_or_else(|| {
                    Error::Config(format!("validation subject {} lacks regions", s.subject_id))
                })?;
                eval::evaluate_joint(&pred, lesion, regions)?.lesion_dice
            }
        };
        scores.push(score);
    }
    Ok(if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    })
}

/// Progress callback invoked after every epoch (epoch index, history so
/// far, bundle state). Used for logging and checkpointing.
pub type EpochHook<'a> = dyn Fn(usize, &TrainHistory, &ModelBundle) + 'a;

/// Train a model. `val` may be empty (no validation scoring).
pub fn train(
    samples: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    mc: &ModelConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    train_with_hook(samples, val, tc, mc, None)
}

pub fn train_with_hook(
    samples: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    mc: &ModelConfig,
    hook: Option<&EpochHook>,
) -> Result<(ModelBundle, TrainHistory)> {
    tc.validate()?;
    mc.validate()?;
    if mc.in_channels != tc.input_config.in_channels() {
        return Err(Error::Config(format!(
            "model has {} input channels but config {} needs {}",
            mc.in_channels,
            tc.input_config,
            tc.input_config.in_channels()
        )));
    }
    if mc.num_classes != tc.task.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but task {} needs {}",
            mc.num_classes,
            tc.task,
            tc.task.num_classes()
        )));
    }
    let items: Vec<TrainingItem> = build_training_items(samples, tc.input_config, tc.task)?;
    if items.is_empty() {
        return Err(Error::Train("no training items".into()));
    }
    // Fail early if targets are missing.
    for s in samples {
        crate::patch::target_field(s, tc.task)?;
    }

    let normalized: Vec<Sample> = samples.iter().map(normalize_sample).collect();
    let val_normalized: Vec<Sample> = val.iter().map(normalize_sample).collect();

    let mut bundle = init_model(mc, channel_tags_for(tc.input_config), tc.task, tc.seed)?;
    let mut opt = NesterovSgd::new(
        tc.lr as f32,
        tc.momentum as f32,
        &bundle.net.param_sizes(),
    );

    let steps_per_epoch = tc
        .batches_per_epoch
        .min(items.len().div_ceil(tc.batch_size))
        .max(1);

    let mut history = TrainHistory { num_items: items.len(), ..Default::default() };

    for epoch in 0..tc.epochs {
        // Epoch-shuffled item order.
        let order = {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(
                tc.seed,
                epoch as u64,
                u64::MAX,
            ));
            let mut idx: Vec<usize> = (0..items.len()).collect();
            idx.shuffle(&mut rng);
            idx
        };

        let mut epoch_loss = 0.0;
        let mut epoch_ce = 0.0;
        let mut epoch_ds = 0.0;

        for batch in 0..steps_per_epoch {
            let slots: Vec<(usize, u64)> = (0..tc.batch_size)
                .map(|k| {
                    let flat = batch * tc.batch_size + k;
                    let item_idx = order[flat % items.len()];
                    (item_idx, derive_seed(tc.seed, epoch as u64, flat as u64))
                })
                .collect();

            let net = &bundle.net;
            let results: Vec<(Gradients<f32>, crate::loss::LossParts)> = slots
                .par_iter()
                .map(|&(item_idx, seed)| {
                    let item = &items[item_idx];
                    let sample = &normalized[item.sample_index];
                    let raw = sample_patch(
                        sample,
                        tc.task,
                        &item.channels,
                        tc.patch_size,
                        tc.fg_bias,
                        seed,
                    )?;
                    let aug_cfg = AugmentConfig {
                        seed: derive_seed(seed, 0xA06, 0),
                        ..tc.augment.clone()
                    };
                    let patch = augment(&raw, &aug_cfg)?;
                    let (logits, tape) = net.forward_item(patch.inputs.view())?;
                    let (parts, dlogits) =
                        composite_loss_grad_item(&logits, &patch.target, tc.loss_weights);
                    let mut grads = net.zero_gradients();
                    net.backward_item(&tape, dlogits.view(), &mut grads);
                    Ok((grads, parts))
                })
                .collect::<Result<Vec<_>>>()?;

            // Deterministic reduction in slot order.
            let mut grads = bundle.net.zero_gradients();
            let mut batch_loss = 0.0;
            let mut batch_ce = 0.0;
            let mut batch_ds = 0.0;
            for (g, parts) in &results {
                grads.add_assign(g);
                batch_loss += parts.total;
                batch_ce += parts.ce;
                batch_ds += parts.ds;
            }
            let inv_b = 1.0 / tc.batch_size as f64;
            grads.scale(inv_b as f32);
            batch_loss *= inv_b;
            batch_ce *= inv_b;
            batch_ds *= inv_b;

            if !batch_loss.is_finite() {
                return Err(Error::Train(format!(
                    "loss became non-finite at epoch {} batch {batch}",
                    epoch + 1
                )));
            }

            opt.step(bundle.net.params_mut(), &grads);
            epoch_loss += batch_loss;
            epoch_ce += batch_ce;
            epoch_ds += batch_ds;
        }

        history.loss.push(epoch_loss / steps_per_epoch as f64);
        history.ce.push(epoch_ce / steps_per_epoch as f64);
        history.ds.push(epoch_ds / steps_per_epoch as f64);

        let due = tc.val_every > 0 && (epoch + 1) % tc.val_every == 0;
        let val_score = if due && !val_normalized.is_empty() {
            validation_dice(&bundle, &val_normalized, tc)?
        } else {
            None
        };
        history.val_dice.push(val_score);

        if let Some(h) = hook {
            h(epoch, &history, &bundle);
        }
    }

    bundle.provenance = Some(TrainProvenance {
        input_config: tc.input_config,
        seed: tc.seed,
        epochs: tc.epochs,
    });
    Ok((bundle, history))
}
