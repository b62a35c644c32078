//! Taxi status inference from low-sampling-rate GPS trajectories.
//!
//! The pipeline finds parking episodes, cuts the remaining stream into
//! running segments, scores every point with a calibrated decision tree over
//! trajectory, road-network, POI and historical features, and smooths those
//! scores with an explicit-duration hidden semi-Markov model.

pub mod calibration;
pub mod error;
pub mod eval;
pub mod features;
pub mod geo;
pub mod harness;
pub mod hsmm;
pub mod io;
pub mod parking;
pub mod pipeline;
pub mod poi;
pub mod road;
pub mod synth;
pub mod trajectory;
pub mod tree;

pub use error::{Error, Result};
pub use trajectory::{GpsPoint, Label, Trajectory};
