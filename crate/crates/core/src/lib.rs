//! Sequential Monte Carlo parameter estimation for quantum characterization
//! models.
//!
//! The crate is organised bottom-up:
//!
//! - [`distributions`]: priors and their analytic moments.
//! - [`model`] and [`models`]: the likelihood contract, built-in models and
//!   the derived wrappers that compose into chains.
//! - [`smc`] and [`resample`]: the particle-filter updater and Liu–West
//!   resampling.
//! - [`regions`]: credible sets, convex hulls and enclosing ellipsoids.
//! - [`design`] and [`perf`]: experiment heuristics and risk simulation.
//! - [`fisher`]: Fisher information and Cramér–Rao style bounds.
//! - [`estimate`]: one-call estimators over tabulated data.
//! - [`data`], [`snapshot`] and [`cli`]: file formats and the batch
//!   command-line front end.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod design;
pub mod distributions;
pub mod error;
pub mod estimate;
pub mod fisher;
pub mod linalg;
pub mod model;
pub mod models;
pub mod perf;
pub mod regions;
pub mod resample;
pub mod rng;
pub mod smc;
pub mod snapshot;

pub use distributions::Distribution;
pub use error::{Error, Result};
pub use model::{Experiment, FieldValue, Model, Outcome};
pub use resample::ResamplerConfig;
pub use rng::{stream_from_seed, substream, RandomStream};
pub use smc::{ParticleFilter, Updater};
