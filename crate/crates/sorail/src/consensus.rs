//! Distributed hypothesis selection: pairwise compatibility, the N-partite
//! graph of all trains' hypotheses, and a seeded voter process in which
//! every train repeatedly samples some of its neighbors and keeps or
//! switches its chosen hypothesis by compatibility count.
//!
//! The process is conceptually asynchronous and local — each decision sees
//! only the sampled neighbors' current selections — but executes as a
//! deterministic sweep: components are processed independently (their
//! random streams never mix), trains update in a per-sweep seeded
//! permutation, and every train draws samples from its own seeded stream.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infra::paths_conflict;
use crate::perception::InteractionGraph;
use crate::solver::Hypothesis;
use crate::infra::TrainId;

/// Default iteration cap per consensus call.
pub const DEFAULT_MAX_ITERATIONS: u64 = 100_000;

/// Two hypotheses are compatible when the paths their origin trains propose
/// for themselves never occupy a section at overlapping times. Only the two
/// origin paths are compared.
pub fn check_compatibility(h1: &Hypothesis, h2: &Hypothesis) -> bool {
    if h1.origin == h2.origin {
        return false;
    }
    paths_conflict(h1.origin_path(), h2.origin_path()).is_none()
}

/// Compatibility count of `h` against a sample of neighbor hypotheses.
pub fn chi(h: &Hypothesis, sampled: &[&Hypothesis]) -> usize {
    sampled.iter().filter(|s| check_compatibility(h, s)).count()
}

/// The hypothesis graph: one partition class of hypothesis ids per train,
/// and an edge for every compatible pair of hypotheses from neighboring
/// trains. N-partite by construction — hypotheses of one train are never
/// compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGraph {
    pub parts: BTreeMap<TrainId, Vec<String>>,
    /// Normalized: first < second (hypothesis ids are globally unique).
    pub edges: BTreeSet<(String, String)>,
}

impl HypothesisGraph {
    pub fn compatible(&self, a: &str, b: &str) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        self.edges.contains(&(key.0.to_owned(), key.1.to_owned()))
    }

    pub fn node_count(&self) -> usize {
        self.parts.values().map(Vec::len).sum()
    }
}

/// Evaluates compatibility for every hypothesis pair of neighboring trains.
pub fn build_hypothesis_graph(
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
    g_i: &InteractionGraph,
) -> Result<HypothesisGraph> {
    for node in &g_i.nodes {
        if all_h.get(node).map_or(true, |hs| hs.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "train {node} has no hypotheses"
            )));
        }
    }
    let parts: BTreeMap<TrainId, Vec<String>> = g_i
        .nodes
        .iter()
        .map(|t| (t.clone(), all_h[t].iter().map(|h| h.id.clone()).collect()))
        .collect();
    let mut edges = BTreeSet::new();
    for (a, b) in &g_i.edges {
        for h1 in &all_h[a] {
            for h2 in &all_h[b] {
                if check_compatibility(h1, h2) {
                    let key = if h1.id < h2.id {
                        (h1.id.clone(), h2.id.clone())
                    } else {
                        (h2.id.clone(), h1.id.clone())
                    };
                    edges.insert(key);
                }
            }
        }
    }
    Ok(HypothesisGraph { parts, edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusCfg {
    pub max_iterations: u64,
    pub seed: u64,
}

impl Default for ConsensusCfg {
    fn default() -> Self {
        ConsensusCfg {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub trains: Vec<TrainId>,
    pub converged: bool,
    /// Full sweeps executed before this component settled (0 = the initial
    /// selections were already mutually compatible).
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    /// Chosen hypothesis id per train.
    pub selection: BTreeMap<TrainId, String>,
    pub components: Vec<ComponentReport>,
    pub all_converged: bool,
    /// Every component converged without a single sweep.
    pub immediate: bool,
    pub decision_steps: BTreeMap<TrainId, u64>,
    pub switches: u64,
}

impl ConsensusOutcome {
    pub fn converged_components(&self) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.converged)
            .map(|(i, _)| i)
            .collect()
    }

    /// Trains whose component reached consensus.
    pub fn converged_trains(&self) -> BTreeSet<TrainId> {
        self.components
            .iter()
            .filter(|c| c.converged)
            .flat_map(|c| c.trains.iter().cloned())
            .collect()
    }

    pub fn selected<'a>(
        &self,
        all_h: &'a BTreeMap<TrainId, Vec<Hypothesis>>,
        t: &TrainId,
    ) -> Option<&'a Hypothesis> {
        let id = self.selection.get(t)?;
        all_h.get(t)?.iter().find(|h| &h.id == id)
    }
}

/// Stable string hash for per-train and per-component random streams.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws `k` distinct elements from `items` by partial Fisher-Yates.
fn sample_without_replacement<'a, T>(items: &[&'a T], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    let mut pool: Vec<&T> = items.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Runs the voter process on one interaction graph.
///
/// Each train starts on its lowest-cost hypothesis. Per sweep, trains of a
/// component update in a seeded random order: a train samples
/// `min(max(1, |N(t)| − i), |N(t)|)` neighbors without replacement (fresh
/// every sweep, `i` the component's sweep count), keeps its hypothesis when
/// it is compatible with the whole sample, and otherwise switches to the
/// hypothesis with the highest compatibility count (ties: lowest cost, then
/// lowest id). A component is converged when every one of its interaction
/// edges joins compatible selections; converged components stop consuming
/// randomness. Components that fail to settle within `max_iterations`
/// sweeps are reported unconverged.
pub fn run_consensus(
    g_i: &InteractionGraph,
    g_h: &HypothesisGraph,
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
    cfg: &ConsensusCfg,
) -> Result<ConsensusOutcome> {
    for node in &g_i.nodes {
        if all_h.get(node).map_or(true, |hs| hs.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "train {node} has no hypotheses"
            )));
        }
    }
    let adjacency = g_i.adjacency();

    let mut selection: BTreeMap<TrainId, String> = BTreeMap::new();
    for t in &g_i.nodes {
        let best = all_h[t]
            .iter()
            .min_by(|a, b| {
                a.cost
                    .partial_cmp(&b.cost)
                    .expect("finite costs")
                    .then_with(|| a.id.cmp(&b.id))
            })
            .expect("nonempty checked above");
        selection.insert(t.clone(), best.id.clone());
    }

    let mut decision_steps: BTreeMap<TrainId, u64> =
        g_i.nodes.iter().map(|t| (t.clone(), 0)).collect();
    let mut switches = 0u64;
    let mut reports = Vec::with_capacity(g_i.components.len());

    for comp in &g_i.components {
        let comp_converged = |sel: &BTreeMap<TrainId, String>| {
            g_i.edges
                .iter()
                .filter(|(a, _)| comp.contains(a))
                .all(|(a, b)| g_h.compatible(&sel[a], &sel[b]))
        };
        let comp_min = comp.first().expect("components are nonempty");
        let mut comp_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(comp_min.as_str()).rotate_left(1));
        let mut train_rngs: BTreeMap<&TrainId, ChaCha8Rng> = comp
            .iter()
            .map(|t| {
                (
                    t,
                    ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(t.as_str())),
                )
            })
            .collect();

        let mut sweeps = 0u64;
        let converged = loop {
            if comp_converged(&selection) {
                break true;
            }
            if sweeps >= cfg.max_iterations {
                break false;
            }
            let mut order: Vec<&TrainId> = comp.iter().collect();
            for i in 0..order.len() {
                let j = comp_rng.gen_range(i..order.len());
                order.swap(i, j);
            }
            for t in order {
                let neighbors: Vec<&TrainId> = adjacency[t].iter().collect();
                let k = (neighbors.len() as u64).saturating_sub(sweeps).max(1) as usize;
                let rng = train_rngs.get_mut(t).expect("seeded above");
                let sampled = sample_without_replacement(&neighbors, k, rng);
                let sample_ids: Vec<&String> = sampled.iter().map(|n| &selection[*n]).collect();

                let current_id = selection[t].clone();
                let chi_of = |hid: &str| {
                    sample_ids
                        .iter()
                        .filter(|s| g_h.compatible(hid, s))
                        .count()
                };
                *decision_steps.get_mut(t).expect("initialized") += 1;
                if chi_of(&current_id) == sample_ids.len() {
                    continue;
                }
                let next = all_h[t]
                    .iter()
                    .map(|h| (h, chi_of(&h.id)))
                    .max_by(|(ha, ca), (hb, cb)| {
                        ca.cmp(cb)
                            .then_with(|| {
                                hb.cost.partial_cmp(&ha.cost).expect("finite costs")
                            })
                            .then_with(|| hb.id.cmp(&ha.id))
                    })
                    .map(|(h, _)| h.id.clone())
                    .expect("nonempty");
                if next != current_id {
                    selection.insert(t.clone(), next);
                    switches += 1;
                }
            }
            sweeps += 1;
        };
        reports.push(ComponentReport {
            trains: comp.clone(),
            converged,
            iterations: sweeps,
        });
    }

    let all_converged = reports.iter().all(|r| r.converged);
    let immediate = all_converged && reports.iter().all(|r| r.iterations == 0);
    Ok(ConsensusOutcome {
        selection,
        components: reports,
        all_converged,
        immediate,
        decision_steps,
        switches,
    })
}
