//! Monte Carlo SDE solving on simulated memristor crossbars.
//!
//! Devices ([`device`]) sit on tiles solved as resistive networks
//! ([`circuit`]). Pairs of devices cycled to the same state give gaussian
//! noise ([`gauss`]), which drives Euler-Maruyama ensembles ([`sde`]).
//! [`stats`] checks the results and [`energy`] tallies the cost.

pub mod circuit;
pub mod device;
pub mod energy;
pub mod error;
pub mod gauss;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
