//! Model configuration, the trained-model bundle, and its on-disk format.
//!
//! A bundle serializes as a little-endian f32 weights blob (`<base>.bin`)
//! plus a JSON sidecar (`<base>.json`) recording the architecture, channel
//! tags, task and training provenance. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Array5, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, UNet};
use crate::volume::{InputConfig, Modality, TaskKind};

/// Normalization flavor applied after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

/// Nonlinearity id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    LeakyRelu,
    Relu,
}

impl Nonlinearity {
    pub fn activation(&self) -> Activation {
        match self {
            Nonlinearity::LeakyRelu => Activation::LeakyRelu,
            Nonlinearity::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder stages; spatial patch dims must divide 2^(depth-1).
    pub depth: usize,
    /// Channels at the first stage, doubled per encoder stage.
    pub base_filters: usize,
    pub norm: NormKind,
    pub nonlinearity: Nonlinearity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            depth: 4,
            base_filters: 16,
            norm: NormKind::Instance,
            nonlinearity: Nonlinearity::LeakyRelu,
        }
    }
}

impl ModelConfig {
    pub fn for_task(task: TaskKind, input: InputConfig) -> Self {
        Self {
            in_channels: input.in_channels(),
            num_classes: task.num_classes(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("model depth must be >= 2".into()));
        }
        if self.base_filters < 4 {
            return Err(Error::Config("base_filters must be >= 4".into()));
        }
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::Config("in_channels must be 1 or 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// What an input channel accepts at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelTag {
    T1,
    Flair,
    /// Modality-interchangeable channel: accepts either sequence.
    Any,
}

impl ChannelTag {
    pub fn accepts(&self, m: Modality) -> bool {
        match self {
            ChannelTag::T1 => m == Modality::T1,
            ChannelTag::Flair => m == Modality::Flair,
            ChannelTag::Any => true,
        }
    }
}

impl std::fmt::Display for ChannelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ChannelTag::T1 => "t1",
            ChannelTag::Flair => "flair",
            ChannelTag::Any => "any",
        };
        f.write_str(s)
    }
}

/// Channel tags implied by an input configuration.
pub fn channel_tags_for(cfg: InputConfig) -> Vec<ChannelTag> {
    match cfg {
        InputConfig::FlairOnly => vec![ChannelTag::Flair],
        InputConfig::T1Only => vec![ChannelTag::T1],
        InputConfig::Concat => vec![ChannelTag::T1, ChannelTag::Flair],
        InputConfig::Interchangeable => vec![ChannelTag::Any],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub input_config: InputConfig,
    pub seed: u64,
    pub epochs: usize,
}

/// A trained (or freshly initialized) model plus everything needed to use
/// it correctly at inference time.
#[derive(Debug)]
pub struct ModelBundle {
    pub net: UNet<f32>,
    pub config: ModelConfig,
    pub channel_tags: Vec<ChannelTag>,
    pub task: TaskKind,
    pub provenance: Option<TrainProvenance>,
    /// Intensity normalization expected on inputs.
    pub normalization: String,
}

pub const NORMALIZATION_ID: &str = "zscore_nonzero";

/// Initialize a model with deterministic He-normal weights.
pub fn init_model(
    config: &ModelConfig,
    channel_tags: Vec<ChannelTag>,
    task: TaskKind,
    seed: u64,
) -> Result<ModelBundle> {
    config.validate()?;
    if channel_tags.len() != config.in_channels {
        return Err(Error::Config(format!(
            "{} channel tags for {} input channels",
            channel_tags.len(),
            config.in_channels
        )));
    }
    if config.num_classes != task.num_classes() {
        return Err(Error::Config(format!(
            "task {task} needs {} classes, config has {}",
            task.num_classes(),
            config.num_classes
        )));
    }
    let net = UNet::init(
        config.in_channels,
        config.num_classes,
        config.depth,
        config.base_filters,
        config.norm == NormKind::Instance,
        config.nonlinearity.activation(),
        seed,
    );
    Ok(ModelBundle {
        net,
        config: config.clone(),
        channel_tags,
        task,
        provenance: None,
        normalization: NORMALIZATION_ID.to_string(),
    })
}

impl ModelBundle {
    /// Batched forward pass: (N, C, D, H, W) logits for a (N, C, D, H, W)
    /// input. Items run in parallel; the result is order-stable.
    pub fn forward(&self, batch: &Array5<f32>) -> Result<Array5<f32>> {
        let sh = batch.shape();
        if sh[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "batch has {} channels, model expects {} (tags: {})",
                sh[1],
                self.config.in_channels,
                self.tags_string()
            )));
        }
        let items: Vec<Array4<f32>> = batch
            .outer_iter()
            .map(|v| v.to_owned())
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|item| self.net.forward_item_no_tape(item.view()))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("stack batch"))
    }

    fn tags_string(&self) -> String {
        self.channel_tags
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Refuse inputs whose modalities disagree with the bundle's tags.
    pub fn check_modalities(&self, inputs: &[Modality]) -> Result<()> {
        if inputs.len() != self.channel_tags.len() {
            return Err(Error::Shape(format!(
                "{} input volumes for {} model channels (tags: {})",
                inputs.len(),
                self.channel_tags.len(),
                self.tags_string()
            )));
        }
        for (tag, &m) in self.channel_tags.iter().zip(inputs.iter()) {
            if !tag.accepts(m) {
                return Err(Error::Shape(format!(
                    "channel tagged '{tag}' cannot take modality '{m}'"
                )));
            }
        }
        Ok(())
    }

    /// Write `<base>.bin` (LE f32 weights) and `<base>.json` (sidecar).
    pub fn save<P: AsRef<Path>>(&self, base: P) -> Result<(PathBuf, PathBuf)> {
        let base = base.as_ref();
        if let Some(parent) = base.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let bin_path = base.with_extension("bin");
        let json_path = base.with_extension("json");

        let params = self.net.params();
        let mut bytes = Vec::with_capacity(self.net.num_parameters() * 4);
        for slot in &params {
            for &v in slot.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(&bin_path)?.write_all(&bytes)?;

        let sidecar = Sidecar {
            format_version: 1,
            config: self.config.clone(),
            channel_tags: self.channel_tags.clone(),
            task: self.task,
            provenance: self.provenance.clone(),
            normalization: self.normalization.clone(),
            params: self
                .net
                .param_names()
                .into_iter()
                .zip(self.net.param_sizes())
                .map(|(name, len)| ParamEntry { name, len })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&json_path, json)?;
        Ok((bin_path, json_path))
    }

    /// Load a bundle saved by [`ModelBundle::save`].
    pub fn load<P: AsRef<Path>>(base: P) -> Result<ModelBundle> {
        let base = base.as_ref();
        let json_path = base.with_extension("json");
        let bin_path = base.with_extension("bin");
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;

        let mut bundle = init_model(
            &sidecar.config,
            sidecar.channel_tags.clone(),
            sidecar.task,
            0,
        )?;
        bundle.provenance = sidecar.provenance;
        bundle.normalization = sidecar.normalization;

        let sizes = bundle.net.param_sizes();
        let names = bundle.net.param_names();
        if sidecar.params.len() != sizes.len() {
            return Err(Error::Data(format!(
                "bundle {} has {} parameter tensors, expected {}",
                base.display(),
                sidecar.params.len(),
                sizes.len()
            )));
        }
        for ((entry, &len), name) in sidecar.params.iter().zip(sizes.iter()).zip(names.iter()) {
            if entry.len != len || &entry.name != name {
                return Err(Error::Data(format!(
                    "bundle parameter mismatch: sidecar has {} ({}), model expects {} ({})",
                    entry.name, entry.len, name, len
                )));
            }
        }

        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        let total: usize = sizes.iter().sum();
        if bytes.len() != total * 4 {
            return Err(Error::Data(format!(
                "weights blob is {} bytes, expected {}",
                bytes.len(),
                total * 4
            )));
        }
        let mut offset = 0usize;
        for slot in bundle.net.params_mut() {
            for v in slot.iter_mut() {
                *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
                offset += 4;
            }
        }
        Ok(bundle)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: ModelConfig,
    channel_tags: Vec<ChannelTag>,
    task: TaskKind,
    provenance: Option<TrainProvenance>,
    normalization: String,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn paper_scale_shape_contract() {
        // depth 4, base 16, 2 classes, 1 channel; 32x128x128 patch.
        let cfg = ModelConfig::default();
        let bundle = init_model(&cfg, vec![ChannelTag::Flair], TaskKind::Lesion, 0).unwrap();
        let x = Array5::<f32>::zeros((1, 1, 32, 128, 128));
        let y = bundle.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 32, 128, 128]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_dimension_is_preserved() {
        let cfg = ModelConfig { depth: 2, base_filters: 4, ..Default::default() };
        let bundle = init_model(&cfg, vec![ChannelTag::Flair], TaskKind::Lesion, 0).unwrap();
        let x = Array5::<f32>::zeros((12, 1, 8, 16, 16));
        let y = bundle.forward(&x).unwrap();
        assert_eq!(y.shape(), &[12, 2, 8, 16, 16]);
    }

    #[test]
    fn same_seed_identical_parameters() {
        let cfg = ModelConfig { depth: 3, base_filters: 8, ..Default::default() };
        let a = init_model(&cfg, vec![ChannelTag::Any], TaskKind::Lesion, 5).unwrap();
        let b = init_model(&cfg, vec![ChannelTag::Any], TaskKind::Lesion, 5).unwrap();
        for (x, y) in a.net.params().iter().zip(b.net.params().iter()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn concat_model_first_layer_has_two_input_channels() {
        let cfg = ModelConfig {
            in_channels: 2,
            depth: 2,
            base_filters: 4,
            ..Default::default()
        };
        let bundle = init_model(
            &cfg,
            vec![ChannelTag::T1, ChannelTag::Flair],
            TaskKind::Lesion,
            0,
        )
        .unwrap();
        assert_eq!(bundle.net.param_sizes()[0], 4 * 2 * 27);
    }

    #[test]
    fn channel_mismatch_is_refused_with_tags_in_message() {
        let cfg = ModelConfig {
            in_channels: 2,
            depth: 2,
            base_filters: 4,
            ..Default::default()
        };
        let bundle = init_model(
            &cfg,
            vec![ChannelTag::T1, ChannelTag::Flair],
            TaskKind::Lesion,
            0,
        )
        .unwrap();
        let x = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        let err = bundle.forward(&x).unwrap_err();
        assert!(err.to_string().contains("t1"), "{err}");
        assert!(bundle.check_modalities(&[Modality::Flair]).is_err());
        assert!(bundle
            .check_modalities(&[Modality::T1, Modality::Flair])
            .is_ok());
        // Swapped order disagrees with the fixed (T1, FLAIR) tags.
        assert!(bundle
            .check_modalities(&[Modality::Flair, Modality::T1])
            .is_err());
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { depth: 2, base_filters: 4, ..Default::default() };
        let mut bundle = init_model(&cfg, vec![ChannelTag::Any], TaskKind::Lesion, 9).unwrap();
        bundle.provenance = Some(TrainProvenance {
            input_config: InputConfig::Interchangeable,
            seed: 9,
            epochs: 3,
        });
        let base = dir.path().join("model");
        bundle.save(&base).unwrap();
        let loaded = ModelBundle::load(&base).unwrap();
        for (x, y) in bundle.net.params().iter().zip(loaded.net.params().iter()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(loaded.channel_tags, vec![ChannelTag::Any]);
        assert_eq!(
            loaded.provenance.as_ref().unwrap().input_config,
            InputConfig::Interchangeable
        );
        // Identical forwards.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Array5::from_shape_fn((1, 1, 4, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let ya = bundle.forward(&x).unwrap();
        let yb = loaded.forward(&x).unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn translated_interior_logits_match() {
        // Translation by the total stride (2^(depth-1)) leaves interior
        // logits equal up to the receptive-field halo. Instance norm sees
        // whole-patch statistics and would blur this, so test the conv path.
        let cfg = ModelConfig {
            depth: 2,
            base_filters: 4,
            norm: NormKind::None,
            ..Default::default()
        };
        let bundle = init_model(&cfg, vec![ChannelTag::Flair], TaskKind::Lesion, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 48usize;
        let a = ndarray::Array4::from_shape_fn((1, 8, n, 16), |_| rng.random_range(-1.0f32..1.0));
        // b[., y, .] = a[., y-2, .]; the vacated slab stays zero.
        let mut b = ndarray::Array4::<f32>::zeros(a.raw_dim());
        for y in 2..n {
            for z in 0..8 {
                for x in 0..16 {
                    b[[0, z, y, x]] = a[[0, z, y - 2, x]];
                }
            }
        }
        let ya = bundle.net.forward_item_no_tape(a.view()).unwrap();
        let yb = bundle.net.forward_item_no_tape(b.view()).unwrap();
        let margin = 18usize;
        let mut checked = 0usize;
        for cls in 0..2 {
            for z in 0..8 {
                for y in margin..(n - margin) {
                    for x in 0..16 {
                        let want = ya[[cls, z, y - 2, x]];
                        let got = yb[[cls, z, y, x]];
                        assert!(
                            (want - got).abs() < 1e-4 * want.abs().max(1.0),
                            "cls {cls} z {z} y {y} x {x}: {want} vs {got}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }
}
