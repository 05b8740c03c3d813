//! Chance-constrained operation and pricing of natural gas networks.
//!
//! The crate models a steady-state gas network with uncertain extractions,
//! and provides:
//!
//! * a validated network description with serde round-tripping
//!   ([`network`]),
//! * a nonlinear steady-state flow solver and a deterministic dispatch
//!   optimizer ([`steady`]),
//! * first-order sensitivities of the flow equations around an operating
//!   point ([`linearize`]),
//! * a model of correlated extraction uncertainty and per-constraint risk
//!   budgets ([`uncertainty`]),
//! * a second-order-cone optimizer for affine control policies
//!   ([`policy`]),
//! * dual-based payment decomposition and equilibrium verification
//!   ([`pricing`]),
//! * out-of-sample validation against the nonlinear physics
//!   ([`validation`]), and
//! * deterministic CSV/JSON reporting ([`report`]).
//!
//! All pressure-like quantities throughout the crate are *squared*
//! pressures, matching the potential form of the steady-state flow
//! equations.

pub mod conic;
pub mod error;
pub mod linearize;
pub mod network;
pub mod policy;
pub mod pricing;
pub mod report;
pub mod steady;
pub mod uncertainty;
pub mod validation;

pub use error::{Error, Result};
