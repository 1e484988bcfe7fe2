//! Dual-task vision transformer for hemorrhage CT classification.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, the ViT encoder and its two classification heads, AdamW training
//! with named-tensor checkpoints, morphological preprocessing of raw scans,
//! dataset balancing and augmentation, evaluation metrics, and a synthetic
//! phantom generator for desk-scale experiments.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod heads;
pub mod image;
pub mod metrics;
pub mod model;
pub mod morph;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use heads::{LabeledSample, Location, Prediction, Presence};
pub use image::ImageTensor;
pub use model::{Dtvit, DtvitConfig};
pub use params::ParamStore;
pub use rng::SplitMix64;
pub use tensor::{Real, Tensor};
pub use vit::{count_params, EncoderConfig, HeadSpec, PatchConfig};
