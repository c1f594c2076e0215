//! Metastable Glauber dynamics of the random-field Curie-Weiss model.
//!
//! The crate is organised bottom-up: [`model`] holds the Hamiltonian and the
//! heat-bath kernel, [`coarse`] the block partitions and lumped rates,
//! [`landscape`] the mesoscopic free energy, [`dynamics`] plain simulation,
//! [`coupling`] the coupled chains and the cycle decomposition, [`exact`] the
//! enumerated oracle and [`stats`] the ensemble tests.

pub mod coarse;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod exact;
pub mod landscape;
pub mod model;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
