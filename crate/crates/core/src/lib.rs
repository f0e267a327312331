//! Homological winding of random-walk limit rays on free groups and
//! Schottky groups: exact group and boundary arithmetic, a reproducible
//! walk engine, drift and covariance estimators, and statistical checks of
//! the limit laws.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimators;
pub mod group;
pub mod harness;
pub mod martingale;
pub mod measure;
pub mod persist;
pub mod pipeline;
pub mod plane;
pub mod rng;
pub mod stats;
pub mod suite;
pub mod tree;
pub mod walk;

pub use error::{Error, Result};
pub use group::{AbelianVector, Letter, Projection, Word};
pub use measure::{validate_measure, Geometry, StepMeasure};
pub use plane::{CircleBoundaryPoint, DiskPoint, Isometry, SchottkyModel};
pub use tree::BoundaryWord;
pub use walk::{Dataset, PathRecord, SimConfig, Simulator, StoppingSpec};
