//! Cluster-wise cooperative eco-approach and departure (Coop-EAD) for connected
//! automated vehicles at a fixed-time signalized intersection.
//!
//! The pipeline mirrors the operating modes of the application:
//!
//! 1. [`clustering`]: earliest-arrival estimates and initial clusters keyed by green window.
//! 2. [`sequencing`]: intra-cluster lane/slot assignment (SPT list scheduling on
//!    identical parallel lanes), window truncation and leader selection.
//! 3. [`platoon_control`]: information-flow topology and the delayed consensus law
//!    followers use to form the cluster.
//! 4. [`ead_profile`]: the cluster leader's scenario identification and
//!    trigonometric-linear speed profile.
//!
//! [`engine`] runs these on a fixed time step for both the cooperative policy and
//! the ego baseline, and [`metrics`] turns the resulting trajectory logs into
//! throughput and surrogate energy comparisons.

pub mod clustering;
pub mod ead_profile;
pub mod engine;
pub mod metrics;
pub mod platoon_control;
pub mod scenario;
pub mod sequencing;

pub use scenario::{Scenario, VehicleId};

/// Absolute tolerance used when comparing times that come out of closed-form
/// arithmetic (slot times, window bounds).
pub const TIME_EPS: f64 = 1e-9;
