//! Crate-wide error type.
//!
//! Library operations return `Result<T>`; plan rejection inside the closed
//! loop is an ordinary logged event, not an error.

use thiserror::Error;

use crate::infra::{RouteId, TdsId, TrainId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A route id is unknown for the given train, or a route is malformed.
    #[error("invalid route {route} for train {train}: {reason}")]
    InvalidRoute {
        train: TrainId,
        route: RouteId,
        reason: String,
    },

    /// A dwell plan entry violates the stop structure of the route.
    #[error("invalid dwell for train {train} at {tds}: {reason}")]
    InvalidDwell {
        train: TrainId,
        tds: TdsId,
        reason: String,
    },

    /// A referenced entity does not exist in the network or timetable.
    #[error("dangling reference: {0}")]
    DanglingReference(String),

    /// Greedy timetable compression could not place a train.
    #[error("timetable compression infeasible for train {train}: {reason}")]
    CompressionInfeasible { train: TrainId, reason: String },

    /// A scheduled stop refers to a TDS that is not a station section.
    #[error("scheduled stop at {tds} for train {train}: not a station TDS")]
    InvalidStop { train: TrainId, tds: TdsId },

    /// The perturbation model has no bucket row for a train.
    #[error("perturbation model incomplete: no bucket for {0}")]
    ModelIncomplete(String),

    /// The simulator found a cyclic wait; the cycle lists the blocked trains.
    #[error("simulation deadlock among trains {0:?}")]
    DeadlockDetected(Vec<TrainId>),

    /// Post-merge repair could not restore a conflict-free plan.
    #[error("plan repair infeasible: {0}")]
    RepairInfeasible(String),

    /// A train has no feasible remaining route from its current position.
    #[error("no feasible route for train {0}")]
    NoRoute(TrainId),

    /// Structural validation of a network or timetable failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
