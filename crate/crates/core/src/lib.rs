//! Potential-based load balancing for mixture-of-experts routing.
//!
//! The crate pairs a catalog of strictly convex balancing potentials with an
//! online dual tracker (an EMA of routing statistics mapped through the
//! potential's gradient), the competing Switch-style and bias-steering
//! baselines, and a small MoE model trained end to end on synthetic
//! multi-domain data so the balancing dynamics can be measured.
//!
//! The potential catalog, the EMA tracker and the balance metrics are generic
//! over [`Scalar`] (`f32`/`f64`); the gradient engine and everything built on
//! it run in `f64`. Concrete aliases for the common instantiations live at
//! the crate root.

// `!(x > 0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod balancer;
pub mod checks;
pub mod corpus;
pub mod experiment;
mod error;
pub mod metrics;
pub mod moe;
pub mod potentials;
pub mod trainer;
mod prob;
mod scalar;

pub use error::{Error, Result};
pub use prob::ProbVector;
pub use scalar::Scalar;

/// Double-precision potential, the type used by configs and the trainer.
pub type Potential = potentials::PotentialSpec<f64>;
/// Single-precision potential.
pub type Potential32 = potentials::PotentialSpec<f32>;
pub type Prob = ProbVector<f64>;
/// Double-precision EMA tracker.
pub type Ema = balancer::EmaTracker<f64>;
