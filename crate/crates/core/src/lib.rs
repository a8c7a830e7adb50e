//! Unsupervised decomposition of images and videos into two layers with
//! coupled deep image prior generators.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the precision.

pub mod composition;
pub mod error;
pub mod generator;
pub mod hints;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub(crate) mod nn;
pub mod optimizer;
pub mod postproc;
pub mod scalar;
pub mod seeds;
pub mod tasks;

pub use composition::{mix, mix_two_mixtures, mix_video, LayerExtras, LayerSet, Mask, SecondLayer, TwoMixtures};
pub use error::{Error, Result, Warning};
pub use generator::{build_generator, Generator, GeneratorSpec, NoiseField, OutputActivation};
pub use hints::{BBox, Fade, HintSchedule};
pub use image::Image;
pub use losses::{LossReport, LossWeights, ObjectiveConfig, ReconNorm, RegSelector};
pub use metrics::{iou, layer_correlation, mixture_complexity_experiment, patch_diversity, psnr, DiagnosticReport, MixMode};
pub use nn::UpsampleMode;
pub use optimizer::{optimize, single_dip_fit, OptimConfig, Outcome, RunState};
pub use postproc::{binarize_mask, guided_filter, resolve_color_ambiguity, GuidedFilterParams};
pub use scalar::Scalar;
pub use tasks::{build_task, estimate_airlight, TaskConfig, TaskGraph, TaskKind};

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Generator32 = Generator<f32>;
pub type Generator64 = Generator<f64>;
pub type LayerSet32 = LayerSet<f32>;
pub type LayerSet64 = LayerSet<f64>;
pub type TaskGraph32 = TaskGraph<f32>;
pub type TaskGraph64 = TaskGraph<f64>;
