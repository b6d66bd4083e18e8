//! Per-train traffic perception: predicting which sections each train can
//! occupy when, identifying the trains it could meet within a look-ahead
//! horizon, merging neighborhoods along rolling-stock links, and building
//! the undirected interaction graph those neighborhoods induce.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infra::{Occupation, RouteId, Secs, TdsId, Time, TrainId, World};
use crate::sim::TrafficState;
use crate::solver::{compile_route, CompiledRoute};

/// Default neighbor-identification horizon in seconds.
pub const DEFAULT_HORIZON: Secs = 900;

/// One predicted stay of a train on a section, under one of its routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedInterval {
    pub train: TrainId,
    pub route: RouteId,
    pub start: Time,
    pub end: Time,
}

/// All predicted occupations, indexed by section. A train traveling several
/// alternative routes contributes one interval per route to every section
/// it could touch (identical intervals are listed once).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationMap {
    pub now: Time,
    pub by_tds: BTreeMap<TdsId, Vec<PredictedInterval>>,
}

impl OccupationMap {
    /// Trains contributing at least one interval.
    pub fn trains(&self) -> BTreeSet<&TrainId> {
        self.by_tds
            .values()
            .flat_map(|v| v.iter().map(|i| &i.train))
            .collect()
    }
}

/// Which intervals qualify another train as a neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRule {
    /// The other train's interval must also touch `[now, now + t_h]`.
    BothInHorizon,
    /// Only the focal train's interval start must fall in the horizon.
    FocalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub t_h: Secs,
    pub rule: NeighborRule,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        NeighborhoodConfig {
            t_h: DEFAULT_HORIZON,
            rule: NeighborRule::BothInHorizon,
        }
    }
}

/// Unimpeded occupations of a compiled route from `release`: each section
/// start is the previous start plus processing time, the first move of an
/// already-entered train never predates `now`, and ends carry the release
/// margin.
fn free_flow_occupations(
    compiled: &CompiledRoute,
    release: Time,
    entered: bool,
    now: Time,
) -> Vec<Occupation> {
    let n = compiled.tds.len();
    let mut starts = Vec::with_capacity(n + 1);
    starts.push(release);
    for i in 0..n {
        let mut next = starts[i] + compiled.proc[i];
        if i == 0 && entered {
            next = next.max(now);
        }
        starts.push(next);
    }
    (0..n)
        .map(|i| Occupation {
            tds: compiled.tds[i].clone(),
            start: starts[i],
            end: starts[i + 1] + compiled.margin[i],
        })
        .collect()
}

/// Projects every scoped train along each of its remaining route options at
/// its current delay and collects the resulting intervals per section.
pub fn predict_occupations(world: &World, ts: &TrafficState) -> Result<OccupationMap> {
    let mut by_tds: BTreeMap<TdsId, Vec<PredictedInterval>> = BTreeMap::new();
    for (id, view) in &ts.trains {
        let train = world.train(id)?;
        if view.route_options.is_empty() {
            return Err(Error::NoRoute(id.clone()));
        }
        let entered = view.position.is_some();
        let start_idx = view.realized.len().saturating_sub(1);
        let release = if entered {
            view.entered_current_at
                .ok_or_else(|| Error::InvalidInput(format!("{id} inside without entry time")))?
        } else {
            view.expected_entry
                .ok_or_else(|| Error::InvalidInput(format!("{id} outside without entry estimate")))?
                .max(ts.now)
        };
        let mut options: Vec<&RouteId> = vec![&view.current_route];
        let mut rest: Vec<&RouteId> = view
            .route_options
            .iter()
            .filter(|r| **r != view.current_route)
            .collect();
        rest.sort();
        options.extend(rest);
        for rid in options {
            let route = train
                .route(rid)
                .ok_or_else(|| Error::DanglingReference(format!("{id} has no route {rid}")))?;
            let compiled = compile_route(world, train, route, start_idx);
            for occ in free_flow_occupations(&compiled, release, entered, ts.now) {
                let list = by_tds.entry(occ.tds.clone()).or_default();
                if list
                    .iter()
                    .any(|i| i.train == *id && i.start == occ.start && i.end == occ.end)
                {
                    continue;
                }
                list.push(PredictedInterval {
                    train: id.clone(),
                    route: rid.clone(),
                    start: occ.start,
                    end: occ.end,
                });
            }
        }
    }
    Ok(OccupationMap {
        now: ts.now,
        by_tds,
    })
}

/// The raw neighbor set of `t`: trains with a predicted interval on a
/// section where `t` has one starting within the horizon, subject to the
/// configured rule. No stock closure.
fn raw_neighbors(
    t: &TrainId,
    occ: &OccupationMap,
    cfg: &NeighborhoodConfig,
    now: Time,
) -> BTreeSet<TrainId> {
    let hi = now + cfg.t_h;
    let mut out = BTreeSet::new();
    for intervals in occ.by_tds.values() {
        let focal_here = intervals
            .iter()
            .any(|i| i.train == *t && i.start >= now && i.start <= hi);
        if !focal_here {
            continue;
        }
        for other in intervals.iter().filter(|i| i.train != *t) {
            if cfg.rule == NeighborRule::BothInHorizon && !(other.start <= hi && other.end > now) {
                continue;
            }
            out.insert(other.train.clone());
        }
    }
    out
}

/// All trains chained to `t` by rolling-stock links (in either direction,
/// transitively) that are visible in the occupation map, `t` included.
fn stock_group(world: &World, t: &TrainId, visible: &BTreeSet<&TrainId>) -> BTreeSet<TrainId> {
    let mut group = BTreeSet::new();
    let mut queue = VecDeque::from([t.clone()]);
    while let Some(id) = queue.pop_front() {
        if !group.insert(id.clone()) {
            continue;
        }
        if let Ok(train) = world.train(&id) {
            for link in [&train.stock_predecessor, &train.stock_successor] {
                if let Some(other) = link {
                    if visible.contains(other) && !group.contains(other) {
                        queue.push_back(other.clone());
                    }
                }
            }
        }
    }
    group
}

/// Neighbors of `t` within the horizon, merged over its rolling-stock
/// group: the union of every group member's raw neighbors plus the other
/// group members themselves, with the result closed under rolling-stock
/// links. The closure matters for costing: a neighbor's coupled leg starts
/// when the neighbor's stock is released, so any re-ordering of the
/// neighbor moves the leg too — leaving it outside the neighborhood would
/// hide that consequence from every plan evaluated over it. Never
/// contains `t`.
pub fn identify_neighbors(
    world: &World,
    t: &TrainId,
    occ: &OccupationMap,
    cfg: &NeighborhoodConfig,
    now: Time,
) -> BTreeSet<TrainId> {
    let visible = occ.trains();
    let group = stock_group(world, t, &visible);
    let mut out = BTreeSet::new();
    for member in &group {
        out.extend(raw_neighbors(member, occ, cfg, now));
    }
    out.extend(group.iter().cloned());
    for id in out.clone() {
        out.extend(stock_group(world, &id, &visible));
    }
    out.remove(t);
    out
}

/// The undirected interaction graph over focal trains: nodes are the
/// neighborhood keys, an edge joins two nodes whenever either one lists the
/// other (symmetrization by union), and components are labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub nodes: Vec<TrainId>,
    /// Normalized: first < second.
    pub edges: BTreeSet<(TrainId, TrainId)>,
    /// Sorted by first member; members sorted.
    pub components: Vec<Vec<TrainId>>,
}

impl InteractionGraph {
    pub fn adjacency(&self) -> BTreeMap<TrainId, BTreeSet<TrainId>> {
        let mut adj: BTreeMap<TrainId, BTreeSet<TrainId>> = self
            .nodes
            .iter()
            .map(|n| (n.clone(), BTreeSet::new()))
            .collect();
        for (a, b) in &self.edges {
            adj.get_mut(a).expect("edge endpoint is a node").insert(b.clone());
            adj.get_mut(b).expect("edge endpoint is a node").insert(a.clone());
        }
        adj
    }

    pub fn component_of(&self, t: &TrainId) -> Option<usize> {
        self.components.iter().position(|c| c.contains(t))
    }
}

/// Builds the interaction graph from per-train neighborhoods. Self-mentions
/// are ignored; mentions of trains that are not focal (not a key) do not
/// create nodes.
pub fn build_interaction_graph(
    neighborhoods: &BTreeMap<TrainId, BTreeSet<TrainId>>,
) -> InteractionGraph {
    let nodes: Vec<TrainId> = neighborhoods.keys().cloned().collect();
    let node_set: BTreeSet<&TrainId> = nodes.iter().collect();
    let mut edges: BTreeSet<(TrainId, TrainId)> = BTreeSet::new();
    for (t, neigh) in neighborhoods {
        for u in neigh {
            if u == t || !node_set.contains(u) {
                continue;
            }
            let (a, b) = if t < u { (t, u) } else { (u, t) };
            edges.insert((a.clone(), b.clone()));
        }
    }
    let mut adj: BTreeMap<&TrainId, Vec<&TrainId>> = BTreeMap::new();
    for (a, b) in &edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen: BTreeSet<&TrainId> = BTreeSet::new();
    let mut components = Vec::new();
    for start in &nodes {
        if seen.contains(start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            if !seen.insert(v) {
                continue;
            }
            comp.push(v.clone());
            if let Some(next) = adj.get(v) {
                queue.extend(next.iter().copied());
            }
        }
        comp.sort();
        components.push(comp);
    }
    components.sort();
    InteractionGraph {
        nodes,
        edges,
        components,
    }
}
