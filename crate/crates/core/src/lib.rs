//! Grid-based Hamilton-Jacobi reachability for 4D systems.
//!
//! The crate computes backward reachable tubes on a dense 4D grid with a
//! first-order Lax-Friedrichs scheme and uses them as a runtime safety filter
//! for an extended Dubins car. Besides the floating-point solver it carries a
//! bit-accurate model of a Q5.27 fixed-point streaming accelerator:
//!
//! * [`grid`]: geometry, indexing, boundary handling and state lookup tables.
//! * [`dynamics`]: the dynamics interface and the extended Dubins car.
//! * [`solver`]: the single-pass production solver and the three-pass reference.
//! * [`fixedpoint`]: the Q5.27 scalar and the fixed-point solver datapath.
//! * [`dataflow`]: line-buffer streaming model and clock-cycle estimator.
//! * [`safety`]: obstacle value functions, interpolation and the filter loop.
//! * [`config`], [`valuefile`], [`service`]: configuration, the binary value
//!   file format and the live simulation service.

pub mod config;
pub mod dataflow;
pub mod dynamics;
pub mod error;
pub mod fixedpoint;
pub mod grid;
pub mod safety;
pub mod service;
pub mod solver;
pub mod valuefile;

pub use error::{Error, Result};
