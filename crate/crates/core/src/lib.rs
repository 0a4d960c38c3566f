//! Truthful participant selection and payments for federated linear bandits.
//!
//! Clients run LinUCB locally and periodically sync sufficient statistics
//! through a server. Each sync is procured from self-interested clients: a
//! selection rule picks participants from their reported costs and a payment
//! rule pays each one its critical value.

pub mod env;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mechanism;
pub mod payments;
pub mod protocol;
pub mod strategies;

pub use error::{Error, Result};
pub use linalg::{PsdMatrix, RealVector, SufficientStats};
pub use mechanism::{CoverageInstance, MechanismKind, SelectionResult, SelectionRule};
pub use payments::{Payment, PaymentSchedule};
pub use strategies::{ReportingStrategy, StrategyKind};

/// Dense client index, `0..N`.
pub type ClientId = usize;
