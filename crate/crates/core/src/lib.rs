//! Asymptotic e-process toolkit.
//!
//! Three engines share one substrate:
//!
//! - exact certification of e-process properties on finite filtered
//!   probability trees, by brute-force stopping-time enumeration and
//!   backward induction ([`tree`], [`verifier`]);
//! - builders for the standard constructions: cumulative products, time
//!   mixtures, p-to-e calibration, horizon selection ([`constructions`]);
//! - a seeded Monte Carlo experiment estimating threshold-excursion
//!   probabilities of cumulative-product trajectories ([`montecarlo`]).
//!
//! The exact engines are generic over the scalar type through
//! [`scalar::Real`]; the aliases below fix `f64` for everyday use.

pub mod bundle;
pub mod cli;
pub mod constructions;
pub mod montecarlo;
pub mod scalar;
pub mod tree;
pub mod verifier;

/// `f64` measure family.
pub type MeasureFamily = tree::MeasureFamily<f64>;
/// `f64` adapted process.
pub type TreeProcess = tree::TreeProcess<f64>;
/// `f64` bi-indexed process.
pub type BiProcess = tree::BiProcess<f64>;
/// `f64` drift sequence.
pub type DriftSequence = tree::DriftSequence<f64>;
/// `f64` certificate.
pub type Certificate = verifier::Certificate<f64>;
/// `f64` trend report.
pub type TrendReport = verifier::TrendReport<f64>;
/// `f64` Doob parts.
pub type DoobParts = verifier::DoobParts<f64>;

pub use tree::{Horizon, HorizonSequence, OutcomeTree, StoppingTime};
