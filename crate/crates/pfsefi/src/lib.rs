//! Maximum-likelihood learning of state-space models with particle filters,
//! built around a score estimator that combines Fisher's identity with
//! fixed-lag smoothing (PF-SEFI). The bundled model family tracks rigid
//! rectangular objects (vehicles) from 2D point observations of their
//! outline, with an Ackermann motion model driven by a learned policy.
//!
//! The crate is organized as a library; the `examples/` directory is the
//! front door, one runnable program per capability:
//!
//! ```text
//! examples/
//!   motion_integrators.rs   closed-form vs quadrature vehicle propagation
//!   gradient_check.rs       reverse-mode gradients vs finite differences
//!   sample_observations.rs  draw point clouds from the observation model
//!   generate_dataset.rs     write a synthetic scene dataset + manifest
//!   track_object.rs         run the particle filter on one trajectory
//!   kalman_oracle.rs        PF marginal likelihood vs exact Kalman filter
//!   score_oracle.rs         PF-SEFI score vs exact score; vanilla-PF bias
//!   score_equivalence.rs    transition-vs-policy gradient identity
//!   estimator_comparison.rs gradient variance of the three estimators
//!   train_policy_stds.rs    recover policy noise parameters by training
//!   lag_sweep.rs            effect of the smoothing lag L on training
//! ```
//!
//! Run one with `cargo run --release -p pfsefi --example <name>`.
//!
//! A thin binary (`pfsefi`) exposes the same capabilities as subcommands
//! (`gen`, `train`, `eval`, `oracle`, `sample-obs`) for scripted runs.
//!
//! Code map:
//! - [`geom`]: poses, vehicle states, actions, observations, trajectories.
//! - [`autodiff`]: scalar reverse-mode tape, parameter vectors, MLPs.
//! - [`motion`]: Ackermann propagation (Fresnel closed form + quadrature).
//! - [`obs`]: edge-triplet point observation model and its gradients.
//! - [`policy`]: simple heuristic policy and neural policy.
//! - [`filter`]: bootstrap particle filter with a fixed-lag ancestry buffer.
//! - [`score`]: PF-SEFI and baseline (pathwise PF, soft-resampling) scores.
//! - [`kalman`]: scalar linear-Gaussian oracle model and exact filter.
//! - [`train`] / [`metrics`]: Adam loop, evaluation metrics, CSV output.
//! - [`datagen`]: synthetic scene generation and dataset serialization.
//! - [`cli`]: subcommand implementations used by the binary.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod filter;
pub mod geom;
pub mod kalman;
pub mod metrics;
pub mod motion;
pub mod numerics;
pub mod obs;
pub mod policy;
pub mod score;
pub mod ssm;
pub mod rng;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
