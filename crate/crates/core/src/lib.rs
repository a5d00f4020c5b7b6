//! Audio-driven co-speech gesture generation over thin-plate-spline keypoints.
//!
//! The crate is organised the same way the pipeline runs:
//!
//! * [`types`] and [`dataset`] hold keypoint clips, normalization statistics
//!   and the on-disk clip format.
//! * [`audio`] turns waveforms into frame-aligned log-mel features and onset
//!   beats.
//! * [`diffusion`] contains the noise schedule, forward noising, both training
//!   objectives and the classifier-free guided sampler.
//! * [`denoiser`] is the transformer noise predictor (built on [`nn`]).
//! * [`trainer`] windows datasets, runs the joint conditional/unconditional
//!   training loop and generates the synthetic audio-coupled corpus.
//! * [`generator`] produces single clips and stitches long sequences.
//! * [`metrics`] implements diversity and beat consistency.
//! * [`tps`] is a thin-plate-spline solver and image warper used to preview
//!   generated keypoints.
//! * [`config`] and [`cli`] back the `gesture-diff` command.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod tps;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
