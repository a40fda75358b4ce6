use alloc::boxed::Box;
use alloc::string::String;

use crate::due::DueSolution;
use crate::net::{ArcId, NodeId};

/// Errors produced by the solver crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("no path from node {origin} to node {destination}")]
    NoPath { origin: NodeId, destination: NodeId },
    #[error("unknown arc {0}")]
    UnknownArc(ArcId),
    #[error("blocking arc {arc} leaves OD pair {origin}->{destination} with truck demand but no truck path")]
    InfeasibleBlocking {
        arc: ArcId,
        origin: NodeId,
        destination: NodeId,
    },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("trajectories live on different grids or have different shapes")]
    GridMismatch,
    #[error("time {t} lies before the grid start {t0}")]
    OutOfRange { t: f64, t0: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("nonpositive arc delay {delay} on arc index {arc}")]
    NonPositiveDelay { arc: usize, delay: f64 },
    #[error("network loading unstable at t = {t}: |state| = {magnitude:e} exceeds bound")]
    Instability { t: f64, magnitude: f64 },
    #[error("equilibrium solver stopped after {} iterations with gap {:e}", .0.iterations, .0.gap)]
    DueNotConverged(Box<DueSolution>),
}

impl Error {
    /// Recover the best iterate carried by a non-converged equilibrium solve.
    /// Any other error is handed back unchanged.
    pub fn into_best_due(self) -> core::result::Result<DueSolution, Error> {
        match self {
            Error::DueNotConverged(best) => Ok(*best),
            other => Err(other),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
