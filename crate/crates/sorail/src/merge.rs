//! The control-center step of each planning cycle: install the hypothesis
//! paths the consensus process settled on, check the merged plan for
//! occupation conflicts, and — when trains from different neighborhoods
//! still clash — repair the plan while honoring the consensus trains'
//! short-term decisions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusOutcome;
use crate::error::{Error, Result};
use crate::infra::{validate_rttp, Rttp, Secs, TdsId, TrainId, World};
use crate::sim::TrafficState;
use crate::solver::{repair, Budget, Hypothesis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub output: Rttp,
    /// Trains whose paths were taken from their selected hypotheses.
    pub replaced_trains: BTreeSet<TrainId>,
    /// Conflicts detected in the merged plan before any repair.
    pub overlaps_found: Vec<(TrainId, TrainId, TdsId)>,
    pub repaired: bool,
    /// Repair was infeasible; `output` is the untouched input plan.
    pub fallback: bool,
}

/// Replaces, for every train of a converged component, its planned path by
/// the path its selected hypothesis proposes for it — each train installs
/// only its own path; neighbor paths inside a hypothesis are informational.
/// Trains of non-converged components and trains outside the consensus
/// keep their input paths byte for byte. The merged plan is then validated;
/// on conflicts, the repair search re-times the plan with all routes kept
/// and every consensus passing order realizing within `[now, now + t_h]`
/// fixed. An infeasible repair falls back to the input plan.
pub fn merge_selected(
    world: &World,
    ts: &TrafficState,
    input: &Rttp,
    outcome: &ConsensusOutcome,
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
    t_h: Secs,
    repair_budget: Budget,
) -> Result<MergeReport> {
    let mut output = input.clone();
    let mut replaced = BTreeSet::new();
    for t in outcome.converged_trains() {
        let h = outcome.selected(all_h, &t).ok_or_else(|| {
            Error::InvalidInput(format!("no hypothesis matches the selection of {t}"))
        })?;
        let path = h
            .plan
            .get(&t)
            .ok_or_else(|| {
                Error::InvalidInput(format!("hypothesis {} lacks a path for {t}", h.id))
            })?
            .clone();
        output.paths.insert(t.clone(), path);
        replaced.insert(t);
    }
    output.horizon_start = ts.now;

    let overlaps = validate_rttp(world, &output)?;
    let overlaps_found: Vec<(TrainId, TrainId, TdsId)> = overlaps
        .iter()
        .map(|o| (o.pair.0.clone(), o.pair.1.clone(), o.tds.clone()))
        .collect();
    if overlaps_found.is_empty() {
        return Ok(MergeReport {
            output,
            replaced_trains: replaced,
            overlaps_found,
            repaired: false,
            fallback: false,
        });
    }

    let consensus = outcome.converged_trains();
    match repair(world, ts, &output, &consensus, t_h, repair_budget) {
        Ok(fixed) => {
            let leftover = validate_rttp(world, &fixed)?;
            if !leftover.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "repair left {} unresolved overlaps",
                    leftover.len()
                )));
            }
            Ok(MergeReport {
                output: fixed,
                replaced_trains: replaced,
                overlaps_found,
                repaired: true,
                fallback: false,
            })
        }
        Err(Error::RepairInfeasible(_)) => Ok(MergeReport {
            output: input.clone(),
            replaced_trains: replaced,
            overlaps_found,
            repaired: false,
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}
