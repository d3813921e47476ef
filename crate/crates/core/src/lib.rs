//! Identification of discrete-time prediction models for a permanent-magnet
//! synchronous motor fed by a two-level inverter.
//!
//! The drive is treated as seven switched autonomous linear systems, one per
//! distinct inverter elementary vector. The crate provides
//!
//! * the continuous plant model and its autonomous-system matrices ([`model`], [`flux`]),
//! * exact and truncated discretization ([`discretization`]),
//! * a high-resolution plant simulator and dataset generator ([`plant`]),
//! * a horizon-1 finite-control-set MPC ([`mpc`]),
//! * grid classing and per-class balancing of datasets ([`dataset`]),
//! * least-squares ([`ls`]) and neural-network ([`mlp`]) model extraction.

pub mod config;
pub mod dataset;
pub mod discretization;
pub mod error;
pub mod flux;
pub mod ls;
pub mod mlp;
pub mod model;
pub mod mpc;
pub mod plant;

pub use error::{Error, Result};
pub use model::{DriveParameters, OperatingConditions, StateVector, SwitchingState, SystemMatrix};

/// Number of distinct autonomous systems kept in datasets and models (v1..v7).
pub const NUM_SUBSETS: usize = 7;
