//! Bi-level dynamic traffic model for urban freight planning.
//!
//! Private vehicles settle into a dynamic user equilibrium for any given
//! truck schedule; a truck operator picks its schedule anticipating that
//! response. The crate provides every numerical piece of that game:
//!
//! - [`net`]: road network, OD demands, enumerated path sets and the
//!   Nguyen–Dupuis benchmark.
//! - [`traj`]: time grids and piecewise-constant trajectories.
//! - [`dnl`]: two-class link-delay-model network loading (arc volumes,
//!   exit flows, exit times, path and effective delays).
//! - [`due`]: lower level, projected fixed-point solver for the private
//!   vehicle equilibrium.
//! - [`mpcc`]: upper level, penalised complementarity reformulation solved by
//!   projected gradient.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, the CLI and
//! experiment drivers live in the `stackfreight` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod dnl;
pub mod due;
mod error;
mod math;
pub mod mpcc;
pub mod net;
pub mod traj;

pub use error::{Error, Result};
