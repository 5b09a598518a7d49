//! Probabilistic atomic memory over timed quorums in a churning population.
//!
//! The crate is layered bottom-up: [`types`] and [`quorum`] hold the value
//! model and the sizing arithmetic, [`membership`] and [`protocol`] the node
//! side, [`sim`] the discrete-event driver, [`trace`] the run records and
//! [`analysis`] the checks run against them.

pub mod analysis;
pub mod membership;
pub mod protocol;
pub mod quorum;
pub mod sim;
pub mod trace;
pub mod types;
