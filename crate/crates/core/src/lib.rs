//! Discrete-time simulator for scheduling federated learning clients over an
//! unreliable wireless uplink.
//!
//! Each round the access point draws a channel realization, picks at most
//! `N` reliable clients with a scheduling policy that weighs update
//! staleness ([`freshness`]) against a per-client value ledger
//! ([`valuation`]), aggregates their local updates with FedAvg
//! ([`learner`]), and records accuracy and staleness statistics
//! ([`simulator`]).

pub mod channel;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod freshness;
pub mod learner;
pub mod scheduler;
pub mod seed;
pub mod simulator;
pub mod valuation;

pub use error::{Error, Result};
