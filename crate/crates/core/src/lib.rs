//! White-matter lesion segmentation and anatomical localization from
//! single- or multi-modal volumetric MRI.
//!
//! The crate covers the full desk-scale pipeline: NIfTI volume I/O, synthetic
//! phantom subjects, patch sampling with MRI-style augmentation, a 3D U-Net
//! trained with a combined cross-entropy + soft-Dice loss under four input
//! configurations (FLAIR-only, T1-only, concatenated, modality-
//! interchangeable), sliding-window inference with softmax-averaging fusion,
//! regional-lesion label algebra, and Dice/burden evaluation.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod infer;
pub mod labels;
pub mod loss;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod normalize;
pub mod optim;
pub mod patch;
pub mod phantom;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    Affine, InputConfig, LabelMap, LabelVocabulary, Modality, Sample, TaskKind, Volume,
};
