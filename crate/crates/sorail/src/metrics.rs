//! Outcome metrics: quasi-conflict counting, consensus regret against the
//! exhaustively enumerated optimum, and the CSV record emitted per
//! (scenario, traffic-management system) run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusOutcome, HypothesisGraph};
use crate::infra::{Rttp, Secs, TrainId};
use crate::perception::InteractionGraph;
use crate::solver::Hypothesis;

// ---------------------------------------------------------------------------
// Quasi-conflicts
// ---------------------------------------------------------------------------

/// Pairs of trains that followed each other immediately on some section
/// while at least one of them ran late. Counted once per pair, on the
/// section where the pair first runs back-to-back.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuasiConflicts {
    /// One `(pair, section)` incidence per affected pair.
    pub incidences: Vec<((TrainId, TrainId), crate::infra::TdsId)>,
    pub pairs: BTreeSet<(TrainId, TrainId)>,
}

impl QuasiConflicts {
    pub fn count(&self) -> usize {
        self.incidences.len()
    }
}

/// Scans every section's occupation sequence in the plan and reports each
/// train pair that occupies some section consecutively while at least one
/// of the two exits with a positive delay. Only the earliest such
/// back-to-back occupation is kept per pair.
pub fn count_quasi_conflicts(
    rttp: &Rttp,
    delays: &BTreeMap<TrainId, Secs>,
) -> QuasiConflicts {
    let late = |t: &TrainId| delays.get(t).copied().unwrap_or(0) > 0;
    // Earliest back-to-back occupation per pair: (follower start, section).
    let mut first: BTreeMap<(TrainId, TrainId), (crate::infra::Time, crate::infra::TdsId)> =
        BTreeMap::new();
    for (tds, stays) in occupation_sequences(rttp) {
        for w in stays.windows(2) {
            let (_, ref a) = w[0];
            let (next_start, ref b) = w[1];
            if a == b || (!late(a) && !late(b)) {
                continue;
            }
            let pair = if a < b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            let candidate = (next_start, tds.clone());
            match first.entry(pair) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(candidate);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    if candidate < *o.get() {
                        o.insert(candidate);
                    }
                }
            }
        }
    }
    let mut out = QuasiConflicts::default();
    for (pair, (_, tds)) in first {
        out.pairs.insert(pair.clone());
        out.incidences.push((pair, tds));
    }
    out
}

/// Per-section occupation sequence `(start, train)`, sorted by start.
fn occupation_sequences(
    rttp: &Rttp,
) -> BTreeMap<crate::infra::TdsId, Vec<(crate::infra::Time, TrainId)>> {
    let mut by_tds: BTreeMap<crate::infra::TdsId, Vec<(crate::infra::Time, TrainId)>> =
        BTreeMap::new();
    for (id, path) in &rttp.paths {
        for o in &path.occupations {
            by_tds
                .entry(o.tds.clone())
                .or_default()
                .push((o.start, id.clone()));
        }
    }
    for list in by_tds.values_mut() {
        list.sort();
    }
    by_tds
}

// ---------------------------------------------------------------------------
// Regret
// ---------------------------------------------------------------------------

/// Regret of one interaction-graph component: how far the consensus
/// selection landed from the best fully compatible assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRegret {
    pub component: usize,
    pub trains: Vec<TrainId>,
    pub selected_cost: f64,
    /// Cost of the optimal fully compatible assignment; `None` when no such
    /// assignment exists or the component is too large to enumerate.
    pub optimal_cost: Option<f64>,
    /// `(selected − optimal) / optimal × 100`; `None` whenever the optimum
    /// is unavailable or zero while the selection is not.
    pub regret_pct: Option<f64>,
}

/// Assignment search space cap: components whose product of hypothesis
/// counts exceeds this are reported as unavailable instead of enumerated.
pub const REGRET_ENUMERATION_CAP: u128 = 200_000;

/// Computes per-component regret for every converged component by
/// exhaustively enumerating fully compatible assignments over the
/// hypothesis graph (an assignment is fully compatible when the selections
/// of every pair of interacting trains are compatible).
pub fn compute_regret(
    g_i: &InteractionGraph,
    g_h: &HypothesisGraph,
    outcome: &ConsensusOutcome,
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
) -> Vec<ComponentRegret> {
    let adjacency = g_i.adjacency();
    let mut out = Vec::new();
    for idx in outcome.converged_components() {
        let trains = outcome.components[idx].trains.clone();
        let selected_cost: f64 = trains
            .iter()
            .filter_map(|t| outcome.selected(all_h, t))
            .map(|h| h.cost)
            .sum();
        let space: u128 = trains
            .iter()
            .map(|t| all_h.get(t).map_or(0, Vec::len) as u128)
            .product();
        let optimal_cost = if space == 0 || space > REGRET_ENUMERATION_CAP {
            None
        } else {
            best_assignment(&trains, &adjacency, g_h, all_h)
        };
        let regret_pct = match optimal_cost {
            Some(opt) if opt > 0.0 => Some(((selected_cost - opt) / opt * 100.0).max(0.0)),
            Some(_) if selected_cost <= f64::EPSILON => Some(0.0),
            _ => None,
        };
        out.push(ComponentRegret {
            component: idx,
            trains,
            selected_cost,
            optimal_cost,
            regret_pct,
        });
    }
    out
}

/// Depth-first enumeration of fully compatible assignments, pruning each
/// candidate against the already-assigned interaction neighbors.
fn best_assignment(
    trains: &[TrainId],
    adjacency: &BTreeMap<TrainId, BTreeSet<TrainId>>,
    g_h: &HypothesisGraph,
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
) -> Option<f64> {
    fn descend(
        level: usize,
        trains: &[TrainId],
        adjacency: &BTreeMap<TrainId, BTreeSet<TrainId>>,
        g_h: &HypothesisGraph,
        all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
        chosen: &mut Vec<usize>,
        cost: f64,
        best: &mut Option<f64>,
    ) {
        if best.map_or(false, |b| cost >= b) {
            return;
        }
        let Some(t) = trains.get(level) else {
            if best.map_or(true, |b| cost < b) {
                *best = Some(cost);
            }
            return;
        };
        let empty = BTreeSet::new();
        let neigh = adjacency.get(t).unwrap_or(&empty);
        for (i, h) in all_h[t].iter().enumerate() {
            let ok = trains[..level].iter().zip(chosen.iter()).all(|(u, &j)| {
                !neigh.contains(u) || g_h.compatible(&h.id, &all_h[u][j].id)
            });
            if !ok {
                continue;
            }
            chosen.push(i);
            descend(level + 1, trains, adjacency, g_h, all_h, chosen, cost + h.cost, best);
            chosen.pop();
        }
    }

    let mut best = None;
    descend(0, trains, adjacency, g_h, all_h, &mut Vec::new(), 0.0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One CSV row: the outcome of running one traffic-management system on one
/// scenario end to end.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub seed: u64,
    pub tms: String,
    pub trains: usize,
    pub weighted_delay: f64,
    pub delay: Secs,
    pub quasi_conflicts: usize,
    pub quasi_pairs: usize,
    /// Mean reported optimality gap over the planning calls that reported
    /// one (centralized solver runs).
    pub mean_gap: Option<f64>,
    /// Fraction of planning calls that needed a post-merge repair.
    pub repair_rate: Option<f64>,
    /// Hypothesis-selection calls (C_T).
    pub consensus_calls: u64,
    /// Calls converging with zero decision steps (C_I).
    pub immediate_calls: u64,
    /// Calls whose every component provably selected the enumerated
    /// optimum (C_O); `None` when regret was never computable.
    pub optimal_calls: Option<u64>,
    pub decision_steps_mean: Option<f64>,
    pub regret_mean_pct: Option<f64>,
    pub regret_max_pct: Option<f64>,
    pub improvement_weighted_vs_fcfs_pct: Option<f64>,
    pub improvement_delay_vs_fcfs_pct: Option<f64>,
    pub improvement_weighted_vs_cen_pct: Option<f64>,
    pub improvement_delay_vs_cen_pct: Option<f64>,
    pub deadlock: bool,
    pub error: Option<String>,
}

/// `(baseline − candidate) / baseline × 100`; undefined on a zero baseline
/// unless the candidate is zero too.
pub fn improvement_pct(baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        if candidate == 0.0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some((baseline - candidate) / baseline * 100.0)
    }
}

pub const METRICS_CSV_VERSION: &str = "# sorail metrics v1";

const COLUMNS: [&str; 22] = [
    "scenario",
    "seed",
    "tms",
    "trains",
    "weighted_delay",
    "delay",
    "quasi_conflicts",
    "quasi_pairs",
    "mean_gap",
    "repair_rate",
    "consensus_calls",
    "immediate_calls",
    "optimal_calls",
    "decision_steps_mean",
    "regret_mean_pct",
    "regret_max_pct",
    "improvement_weighted_vs_fcfs_pct",
    "improvement_delay_vs_fcfs_pct",
    "improvement_weighted_vs_cen_pct",
    "improvement_delay_vs_cen_pct",
    "deadlock",
    "error",
];

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips; integers print bare.
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the records as versioned CSV: a version comment, a header line,
/// one row per record, `\n` line endings, empty cells for unavailable
/// values.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{METRICS_CSV_VERSION}");
    let _ = writeln!(out, "{}", COLUMNS.join(","));
    for r in records {
        let cells = [
            csv_escape(&r.scenario),
            r.seed.to_string(),
            csv_escape(&r.tms),
            r.trains.to_string(),
            fmt_f64(r.weighted_delay),
            r.delay.to_string(),
            r.quasi_conflicts.to_string(),
            r.quasi_pairs.to_string(),
            fmt_opt(r.mean_gap),
            fmt_opt(r.repair_rate),
            r.consensus_calls.to_string(),
            r.immediate_calls.to_string(),
            r.optimal_calls.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt(r.decision_steps_mean),
            fmt_opt(r.regret_mean_pct),
            fmt_opt(r.regret_max_pct),
            fmt_opt(r.improvement_weighted_vs_fcfs_pct),
            fmt_opt(r.improvement_delay_vs_fcfs_pct),
            fmt_opt(r.improvement_weighted_vs_cen_pct),
            fmt_opt(r.improvement_delay_vs_cen_pct),
            (r.deadlock as u8).to_string(),
            csv_escape(r.error.as_deref().unwrap_or_default()),
        ];
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
