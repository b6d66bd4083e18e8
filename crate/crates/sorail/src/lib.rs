//! Self-organizing railway traffic management on track-detection-section
//! (TDS) granularity.
//!
//! The crate models a dispatching area as a graph of TDSs, trains as timed
//! occupations of those sections, and a real-time traffic plan (RTTP) as the
//! set of routes and passing orders all trains follow. On top of that core
//! calculus it provides:
//!
//! - a deterministic discrete-event simulator that moves trains through the
//!   area under an installed plan ([`sim`]),
//! - timetable preparation: compression to a conflict-free reference,
//!   splitting through-trains at their stops into stock-linked legs, and
//!   seeded entrance-delay sampling ([`scenario`]),
//! - an exact branch-and-bound rescheduler over route choices and passing
//!   orders ([`solver`]),
//! - the self-organizing pipeline in which each train builds a local
//!   neighborhood ([`perception`]), proposes plan hypotheses ([`solver`]),
//!   agrees with its neighbors through a sampled voting process
//!   ([`consensus`]) and installs the agreed paths ([`merge`]),
//! - centralized and first-come-first-served reference dispatchers
//!   ([`baselines`]) and a closed-loop experiment harness with CSV metrics
//!   ([`harness`]).
//!
//! Everything is deterministic given a seed: RNGs are explicit, map types in
//! results are ordered, and solver budgets can be expressed in node
//! expansions instead of wall time.

pub mod baselines;
pub mod consensus;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod infra;
pub mod io;
pub mod merge;
pub mod metrics;
pub mod perception;
pub mod scenario;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
