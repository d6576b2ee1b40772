//! Adaptive feature injection and latent perturbation for inversion-based
//! flow editing.
//!
//! The crate builds the full edit loop at desk scale: invert a source latent
//! through a flow ODE while caching attention keys and values, perturb the
//! inverted latent toward noise with per-channel strengths, then sample
//! forward under the target prompt while blending cached features back in
//! with a smoothly decaying weight. A closed-form linear flow verifies the
//! solvers and a small seeded attention network stands in for the backbone.

pub mod error;
pub mod fmt;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod schedule;
pub mod solver;

pub use error::{Error, Phase, Result};
pub use latent::{Latent, SeededRng, TokenSet};
