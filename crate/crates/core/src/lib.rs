//! Soundscape bird-call detection.
//!
//! The pipeline turns long field recordings into one prediction row per
//! 5-second frame:
//!
//! 1. [`audio_io`] decodes WAV input and resamples it to 32 kHz.
//! 2. [`spectro`] computes log-mel spectrograms and prepares training clips.
//! 3. [`augment`] perturbs training spectrograms.
//! 4. [`scoring`] produces per-second class probabilities from sliding 5-s windows.
//! 5. [`calib`] re-scores each (frame, species) pair with a small second-stage model.
//! 6. [`postproc`] applies rejection rules and thresholds to build label sets.
//! 7. [`metrics`] scores label sets against ground truth.

// `!(x > y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_io;
pub mod augment;
pub mod calib;
pub mod cli;
pub mod geo;
pub mod kv;
pub mod metrics;
pub mod optim;
pub mod postproc;
pub mod scoring;
pub mod spectro;
