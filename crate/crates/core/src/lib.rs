//! Detection of stealthy false-data-injection attacks on DC state estimation.
//!
//! Phase angles of a power grid form a Gaussian Markov random field whose graph
//! follows the grid topology. A stealthy attack `a = Hd` leaves bad-data residuals
//! untouched but perturbs the angle statistics, so the Markov graph learned from
//! a window of samples stops matching the topology. Attacked buses are then
//! localized with per-bus KL anomaly scores.
//!
//! Pipeline: [`case_io`] → [`grid_model`] → [`gmrf`] → [`stream_cov`] →
//! [`cct`] → [`detect`], with [`attack`] generating corruptions and
//! [`experiment`] driving reproducible runs.

pub mod attack;
pub mod case_io;
pub mod cct;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod gmrf;
pub mod grid_model;
mod plot;
pub mod stream_cov;

pub use case_io::{BusId, GridCase};
pub use error::{Error, Result};
pub use grid_model::{EdgeSet, SusceptanceMatrix};
