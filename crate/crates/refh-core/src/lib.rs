//! Recurrent exponential-family harmoniums and their benchmark ecosystem.
//!
//! This crate implements a two-layer exponential-family harmonium (a
//! Boltzmann-machine-like undirected model with one hidden and one visible
//! layer) whose visible layer is split into an *observation* block and a
//! *recurrent* block fed from the previous step's hidden means. Feeding the
//! hidden means back as data turns a static density estimator into a filter
//! that can be trained on sequences with plain contrastive divergence — no
//! backpropagation through time required. Rival trainers that clamp the
//! recurrent block (TRBM) or add the full backprop-through-time correction
//! (RTRBM) are included for comparison, along with synthetic sensory worlds
//! (a noisily observed damped oscillator encoded by Poisson tuning curves,
//! and bouncing-ball movies), exact Kalman/EM baselines, and evaluation
//! tooling.
//!
//! Module map:
//! - [`exp_family`]: unit families (Bernoulli, Poisson), layer specifications,
//!   mean functions and samplers.
//! - [`harmonium`]: parameter container, layer passes, Gibbs chains, and
//!   contrastive-divergence gradients.
//! - [`temporal`]: filtering recursions, training schedules and loops for the
//!   recurrent/TRBM/RTRBM variants, BPTT vectors, and trajectory synthesis.
//! - [`worldgen`]: the damped-spring world with probabilistic population-code
//!   observations, and the bouncing-ball world.
//! - [`baselines`]: pseudo-observation extraction, Kalman filter/smoother,
//!   and EM system identification for linear-dynamical-system baselines.
//! - [`eval`]: stimulus decoding, circular mean-squared error, next-frame
//!   prediction error, identifiability checks, and report containers.
//! - [`checkpoint`]: deterministic text checkpoints with bit-exact round-trip.
//! - [`dataset`]: dataset file formats (CSV observation/latent tables and
//!   run-length-encoded binary frame archives).
//! - [`rng`]: counter-based random-stream derivation so that parallel or
//!   resumed runs reproduce byte-identical results.
//! - [`wrap`]: circular (wrap-around) geometry helpers.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exp_family;
pub mod harmonium;
pub mod rng;
pub mod temporal;
pub mod worldgen;
pub mod wrap;

pub use error::{Error, Result};
pub use exp_family::{LayerSpec, UnitFamily};
pub use harmonium::{AugmentedFrame, CdMode, CdOptions, GradientSet, HarmoniumParams};
pub use temporal::{PassCounts, TrainSchedule};
