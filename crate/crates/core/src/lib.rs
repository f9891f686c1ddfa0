//! Learning-based flat model predictive control.
//!
//! The stack is a convex flat MPC over chained integrators, an affine-kernel
//! Gaussian-process model of the flat input map, and a second-order cone
//! safety filter that enforces probabilistic Lyapunov decrease, tightened
//! half-space flat-state constraints and hard input bounds.

pub mod conic;
pub mod error;
pub mod filter;
pub mod flat;
pub mod fmpc;
pub mod gp;
pub mod harness;
pub mod quadrotor;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases.
pub type AffineGpF64 = gp::AffineGp<f64>;
pub type FlatMpcF64 = fmpc::FlatMpc<f64>;
pub type DiscreteFlatLtiF64 = flat::DiscreteFlatLti<f64>;
pub type ExtensionSpecF64 = flat::ExtensionSpec<f64>;
pub type RiccatiResultF64 = flat::RiccatiResult<f64>;
pub type ConeProgramF64 = conic::ConeProgram<f64>;
pub type InteriorPointF64 = conic::InteriorPoint<f64>;
pub type FilterConfigF64 = filter::FilterConfig<f64>;
pub type FilterResultF64 = filter::FilterResult<f64>;
pub type QuadParamsF64 = quadrotor::QuadParams<f64>;
pub type HalfSpaceF64 = fmpc::HalfSpace<f64>;
