//! Socially-aware multi-pedestrian trajectory forecasting.
//!
//! The crate trains a shared-encoder model with two heads: a conditional
//! variational forecaster that predicts 12 future timesteps for every
//! pedestrian in a scene, and a masked-sequence reconstructor that fills in
//! randomly zeroed past timesteps. Both heads attend over all pedestrians
//! jointly through agent-aware attention, and both are penalized by a hinge
//! loss on pairwise proximity so that predicted crowds stay socially
//! plausible. During training, scenes whose forecaster loss keeps climbing
//! are reconstructed and re-forecast into pseudo-trajectories that extend
//! the training set.
//!
//! Module layout:
//! - [`nn`]: differentiable primitives on a tape (linear, softmax, layer
//!   norm, agent-aware attention, diagonal-Gaussian KL, reparameterization).
//! - [`data`]: trajectory file ingestion, scene windowing, normalization,
//!   masking, and a social-force synthetic scene generator.
//! - [`model`]: the shared encoder, prior/posterior heads, forecasting and
//!   reconstruction decoders, sampling, and checkpointing.
//! - [`losses`]: forecaster and reconstructor objectives plus the social
//!   hinge terms and their weighted total.
//! - [`curriculum`]: per-sample difficulty tracking and the augmentation
//!   pool lifecycle, including the baseline augmentation strategies.
//! - [`training`]: the end-to-end loop, Adam, and the step scheduler.
//! - [`metrics`]: ADE/FDE, KDE negative log likelihood, overlap statistics,
//!   and the evaluation harness.

pub mod curriculum;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;
