//! Exact scheduling and rerouting search over the timed-occupation model.
//!
//! The solver is a depth-first branch-and-bound over two decision layers:
//! first a route option per free train (the currently planned routes are
//! explored first, so the best fixed-route solution is found early and warm
//! starts the rerouting part of the search), then the passing order of the
//! earliest unresolved section overlap. Given routes and orders, the
//! earliest schedule is the longest path in an acyclic event graph; its
//! objective value on a partial order set is a valid lower bound because
//! further ordering decisions only add constraints.
//!
//! On top of the search sit the services the traffic-management pipeline
//! needs: plan reprojection, hypothesis generation and sharing, greedy
//! first-arriver ordering, and the short-term-preserving plan repair.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infra::{
    path_exit_time, Occupation, Route, RouteId, Rttp, Secs, TdsId, Time, TimedPath, Train,
    TrainId, World,
};
use crate::sim::TrafficState;

/// Default node-expansion budget for one search.
pub const DEFAULT_NODE_BUDGET: u64 = 200_000;

// ---------------------------------------------------------------------------
// Instance model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    WeightedDelay,
    UnweightedDelay,
}

/// A route option compiled for the search: the remaining section sequence
/// from the train's current position, with per-section processing times
/// (traversal plus minimum dwell) and release margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledRoute {
    pub route_id: RouteId,
    pub tds: Vec<TdsId>,
    pub proc: Vec<Secs>,
    /// Margin appended to each occupation after the move to the next
    /// section; zero on the last section of a stock-handoff leg.
    pub margin: Vec<Secs>,
}

impl CompiledRoute {
    fn total_proc(&self) -> Secs {
        self.proc.iter().sum()
    }
}

/// One train of a sub-instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrain {
    pub id: TrainId,
    /// Objective weight (1 for unweighted instances).
    pub weight: f64,
    /// Reference exit time delays are measured against.
    pub sched_exit: Time,
    /// Earliest start of the first compiled section. For trains already
    /// inside the area this is the realized entry into the current section
    /// and is fixed rather than a lower bound.
    pub release: Time,
    pub entered: bool,
    /// Free trains may pick any option; constrained trains keep their single
    /// option and must respect `exit_cap`.
    pub free: bool,
    /// Hard latest exit (constrained trains: their currently planned exit).
    pub exit_cap: Option<Time>,
    /// In-instance stock predecessor: this train starts at its exit.
    pub stock_pred: Option<TrainId>,
    /// Route options; index 0 is the currently planned route.
    pub options: Vec<CompiledRoute>,
}

/// A fixed passing order: `first` must clear `tds` before `second` enters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedOrder {
    pub first: TrainId,
    pub second: TrainId,
    pub tds: TdsId,
}

/// A self-contained scheduling/rerouting instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubInstance {
    pub now: Time,
    pub objective: Objective,
    /// Sorted by train id.
    pub trains: Vec<InstanceTrain>,
    #[serde(default)]
    pub fixed_orders: Vec<FixedOrder>,
}

impl SubInstance {
    pub fn train_index(&self, id: &TrainId) -> Option<usize> {
        self.trains.binary_search_by(|t| t.id.cmp(id)).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trains.is_empty() {
            return Err(Error::InvalidInput("instance has no trains".into()));
        }
        for w in self.trains.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::InvalidInput(
                    "instance trains must be sorted by unique id".into(),
                ));
            }
        }
        for t in &self.trains {
            if t.options.is_empty() {
                return Err(Error::NoRoute(t.id.clone()));
            }
            if !t.free && t.options.len() != 1 {
                return Err(Error::InvalidInput(format!(
                    "constrained train {} must have exactly one route option",
                    t.id
                )));
            }
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "train {} has non-positive weight {}",
                    t.id, t.weight
                )));
            }
            for o in &t.options {
                if o.tds.is_empty() || o.tds.len() != o.proc.len() || o.tds.len() != o.margin.len()
                {
                    return Err(Error::InvalidInput(format!(
                        "malformed compiled route {} of {}",
                        o.route_id, t.id
                    )));
                }
            }
            if let Some(pred) = &t.stock_pred {
                if self.train_index(pred).is_none() {
                    return Err(Error::DanglingReference(format!(
                        "stock predecessor {pred} of {} not in instance",
                        t.id
                    )));
                }
                if pred == &t.id {
                    return Err(Error::InvalidInput(format!("{} chains to itself", t.id)));
                }
            }
        }
        for f in &self.fixed_orders {
            for id in [&f.first, &f.second] {
                if self.train_index(id).is_none() {
                    return Err(Error::DanglingReference(format!(
                        "fixed order references unknown train {id}"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Search configuration and results
// ---------------------------------------------------------------------------

/// Search effort limit, expressed in expanded nodes for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub nodes: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            nodes: DEFAULT_NODE_BUDGET,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveCfg {
    /// Keep exploring subtrees whose bound is within this percentage above
    /// the incumbent (0 = pure best-first pruning).
    pub slack_pct: f64,
    /// Maximum solutions kept.
    pub pool_cap: usize,
    pub budget: Budget,
}

impl Default for SolveCfg {
    fn default() -> Self {
        SolveCfg {
            slack_pct: 0.0,
            pool_cap: 1,
            budget: Budget::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    TimeLimit,
    Infeasible,
}

/// One feasible plan over the instance trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: BTreeMap<TrainId, TimedPath>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// Sorted by (value, then lexicographically by train/route/start times).
    pub solutions: Vec<Solution>,
    pub lower_bound: f64,
    pub status: SolveStatus,
    /// (best − lower_bound)/best when a best solution with positive value
    /// exists, else 0.
    pub gap: f64,
    pub nodes: u64,
}

impl SolveResult {
    pub fn best(&self) -> Option<&Solution> {
        self.solutions.first()
    }
}

// ---------------------------------------------------------------------------
// The branch-and-bound search
// ---------------------------------------------------------------------------

type LexKey = Vec<(TrainId, RouteId, Vec<Time>)>;

struct PoolEntry {
    value: f64,
    key: LexKey,
    plan: BTreeMap<TrainId, TimedPath>,
}

/// An applied ordering decision, with node positions materialized.
#[derive(Clone)]
struct OrderEdge {
    first: usize,
    first_pos: usize,
    second: usize,
    second_pos: usize,
    margin: Secs,
}

struct Propagated {
    dist: Vec<Time>,
    value: f64,
    overlap: Option<OverlapPick>,
}

struct OverlapPick {
    a: usize,
    a_pos: usize,
    b: usize,
    b_pos: usize,
    /// True when `a` reaches the section first in the relaxed schedule.
    a_first: bool,
}

enum Entry {
    Go,
    Cut,
    Stop,
}

struct Search<'a> {
    inst: &'a SubInstance,
    cfg: &'a SolveCfg,
    chosen: Vec<usize>,
    decided: Vec<OrderEdge>,
    pool: Vec<PoolEntry>,
    nodes_used: u64,
    truncated: bool,
    min_truncated_bound: f64,
}

impl<'a> Search<'a> {
    fn new(inst: &'a SubInstance, cfg: &'a SolveCfg) -> Self {
        Search {
            inst,
            cfg,
            chosen: vec![0; inst.trains.len()],
            decided: Vec::new(),
            pool: Vec::new(),
            nodes_used: 0,
            truncated: false,
            min_truncated_bound: f64::INFINITY,
        }
    }

    fn best_value(&self) -> Option<f64> {
        self.pool.first().map(|e| e.value)
    }

    /// Budget and bound gate at every node.
    fn enter(&mut self, bound: f64) -> Entry {
        if self.nodes_used >= self.cfg.budget.nodes {
            self.truncated = true;
            self.min_truncated_bound = self.min_truncated_bound.min(bound);
            return Entry::Stop;
        }
        self.nodes_used += 1;
        if let Some(best) = self.best_value() {
            let thresh = best * (1.0 + self.cfg.slack_pct / 100.0);
            if bound > thresh {
                return Entry::Cut;
            }
            if self.pool.len() == self.cfg.pool_cap
                && bound >= self.pool.last().expect("pool nonempty").value
            {
                return Entry::Cut;
            }
        }
        Entry::Go
    }

    // -- route assignment levels -------------------------------------------

    fn dfs_routes(&mut self, level: usize) {
        let Some(bound) = self.route_bound(level) else {
            return; // some train cannot meet its exit cap: prune
        };
        match self.enter(bound) {
            Entry::Go => {}
            Entry::Cut | Entry::Stop => return,
        }
        if level == self.inst.trains.len() {
            self.dfs_orders();
            return;
        }
        let n_opts = self.inst.trains[level].options.len();
        for oi in 0..n_opts {
            self.chosen[level] = oi;
            self.dfs_routes(level + 1);
        }
        self.chosen[level] = 0;
    }

    /// Free-flow lower bound with trains below `level` fixed to their chosen
    /// option and the rest on their fastest option; inter-train constraints
    /// other than stock chaining are relaxed. `None` when an exit cap is
    /// already violated.
    fn route_bound(&self, level: usize) -> Option<f64> {
        let n = self.inst.trains.len();
        let mut exits: Vec<Option<Time>> = vec![None; n];
        for i in 0..n {
            self.free_flow_exit(i, level, &mut exits);
        }
        let mut value = 0.0;
        for (i, t) in self.inst.trains.iter().enumerate() {
            let exit = exits[i].expect("computed above");
            if let Some(cap) = t.exit_cap {
                if exit > cap {
                    return None;
                }
            }
            value += t.weight * (exit - t.sched_exit).max(0) as f64;
        }
        Some(value)
    }

    fn free_flow_exit(&self, i: usize, level: usize, exits: &mut Vec<Option<Time>>) -> Time {
        if let Some(e) = exits[i] {
            return e;
        }
        let t = &self.inst.trains[i];
        let entry = if t.entered {
            t.release
        } else {
            let pred_exit = t
                .stock_pred
                .as_ref()
                .and_then(|p| self.inst.train_index(p))
                .map(|pi| self.free_flow_exit(pi, level, exits))
                .unwrap_or(Time::MIN);
            t.release.max(pred_exit)
        };
        let options: &[CompiledRoute] = if i < level {
            std::slice::from_ref(&t.options[self.chosen[i]])
        } else {
            &t.options
        };
        let exit = options
            .iter()
            .map(|o| {
                if t.entered {
                    (t.release + o.proc[0]).max(self.inst.now) + o.total_proc() - o.proc[0]
                } else {
                    entry + o.total_proc()
                }
            })
            .min()
            .expect("options are nonempty");
        exits[i] = Some(exit);
        exit
    }

    // -- ordering levels ----------------------------------------------------

    fn dfs_orders(&mut self) {
        let Some(prop) = self.propagate() else {
            return; // cyclic orders, pushed fixed start, or exit cap broken
        };
        match self.enter(prop.value) {
            Entry::Go => {}
            Entry::Cut | Entry::Stop => return,
        }
        let Some(pick) = prop.overlap else {
            self.offer(prop);
            return;
        };
        let (first, second) = if pick.a_first {
            ((pick.a, pick.a_pos), (pick.b, pick.b_pos))
        } else {
            ((pick.b, pick.b_pos), (pick.a, pick.a_pos))
        };
        for ((p, pp), (q, qp)) in [(first, second), (second, first)] {
            // No train can be ordered onto the section another train is
            // already standing in.
            if self.inst.trains[q].entered && qp == 0 {
                continue;
            }
            let margin = self.inst.trains[p].options[self.chosen[p]].margin[pp];
            self.decided.push(OrderEdge {
                first: p,
                first_pos: pp,
                second: q,
                second_pos: qp,
                margin,
            });
            self.dfs_orders();
            self.decided.pop();
        }
    }

    /// Earliest schedule under the chosen routes and the decided plus fixed
    /// orders: longest path over the event graph. `None` when infeasible.
    fn propagate(&self) -> Option<Propagated> {
        let n = self.inst.trains.len();
        let mut off = vec![0usize; n + 1];
        for i in 0..n {
            off[i + 1] = off[i] + self.route(i).tds.len() + 1;
        }
        let nn = off[n];

        let mut init = vec![Time::MIN; nn];
        for (i, t) in self.inst.trains.iter().enumerate() {
            init[off[i]] = t.release;
            if t.entered {
                // The next movement cannot predate the planning instant.
                init[off[i] + 1] = init[off[i] + 1].max(self.inst.now);
            }
        }

        let mut edges: Vec<(usize, usize, Secs)> = Vec::new();
        for (i, t) in self.inst.trains.iter().enumerate() {
            let o = self.route(i);
            for p in 0..o.tds.len() {
                edges.push((off[i] + p, off[i] + p + 1, o.proc[p]));
            }
            if !t.entered {
                if let Some(pi) = t.stock_pred.as_ref().and_then(|p| self.inst.train_index(p)) {
                    edges.push((off[pi] + self.route(pi).tds.len(), off[i], 0));
                }
            }
        }
        for f in &self.inst.fixed_orders {
            let (Some(a), Some(b)) = (
                self.inst.train_index(&f.first),
                self.inst.train_index(&f.second),
            ) else {
                continue;
            };
            let (Some(pa), Some(pb)) = (
                self.route(a).tds.iter().position(|t| t == &f.tds),
                self.route(b).tds.iter().position(|t| t == &f.tds),
            ) else {
                continue; // vacuous under the chosen routes
            };
            let margin = self.route(a).margin[pa];
            edges.push((off[a] + pa + 1, off[b] + pb, margin));
        }
        for d in &self.decided {
            edges.push((
                off[d.first] + d.first_pos + 1,
                off[d.second] + d.second_pos,
                d.margin,
            ));
        }

        // Longest path by Kahn's algorithm; a leftover node means a cycle.
        let mut adj: Vec<Vec<(usize, Secs)>> = vec![Vec::new(); nn];
        let mut indeg = vec![0usize; nn];
        for &(u, v, w) in &edges {
            adj[u].push((v, w));
            indeg[v] += 1;
        }
        let mut dist = init;
        let mut queue: Vec<usize> = (0..nn).filter(|&v| indeg[v] == 0).collect();
        let mut processed = 0;
        while let Some(u) = queue.pop() {
            processed += 1;
            let du = dist[u];
            for &(v, w) in &adj[u] {
                if du != Time::MIN && du + w > dist[v] {
                    dist[v] = du + w;
                }
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push(v);
                }
            }
        }
        if processed != nn {
            return None;
        }

        let mut value = 0.0;
        for (i, t) in self.inst.trains.iter().enumerate() {
            if t.entered && dist[off[i]] > t.release {
                return None; // an order would push a standing train's past
            }
            let exit = dist[off[i] + self.route(i).tds.len()];
            if let Some(cap) = t.exit_cap {
                if exit > cap {
                    return None;
                }
            }
            value += t.weight * (exit - t.sched_exit).max(0) as f64;
        }

        // Earliest unresolved overlap: decided and fixed pairs cannot
        // overlap any more, so any hit is a genuinely open decision.
        let mut sections: BTreeMap<&TdsId, Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..n {
            for (p, tds) in self.route(i).tds.iter().enumerate() {
                sections.entry(tds).or_default().push((i, p));
            }
        }
        // Trains are sorted by id, so comparing indices compares ids.
        let mut best: Option<((Time, &TdsId, usize, usize), OverlapPick)> = None;
        for (tds, users) in &sections {
            for (ui, &(a, ap)) in users.iter().enumerate() {
                let (sa, ea) = self.occupation(&dist, &off, a, ap);
                for &(b, bp) in &users[ui + 1..] {
                    if a == b {
                        continue;
                    }
                    let (sb, eb) = self.occupation(&dist, &off, b, bp);
                    if sa.max(sb) >= ea.min(eb) {
                        continue;
                    }
                    let key = (sa.max(sb), *tds, a.min(b), a.max(b));
                    if best.as_ref().map_or(true, |(bk, _)| key < *bk) {
                        let a_first = (sa, a) < (sb, b);
                        best = Some((
                            key,
                            OverlapPick {
                                a,
                                a_pos: ap,
                                b,
                                b_pos: bp,
                                a_first,
                            },
                        ));
                    }
                }
            }
        }

        Some(Propagated {
            value,
            overlap: best.map(|(_, pick)| pick),
            dist,
        })
    }

    fn route(&self, i: usize) -> &CompiledRoute {
        &self.inst.trains[i].options[self.chosen[i]]
    }

    fn occupation(&self, dist: &[Time], off: &[usize], i: usize, p: usize) -> (Time, Time) {
        let o = self.route(i);
        (dist[off[i] + p], dist[off[i] + p + 1] + o.margin[p])
    }

    /// Record a conflict-free leaf in the solution pool.
    fn offer(&mut self, prop: Propagated) {
        let n = self.inst.trains.len();
        let mut off = vec![0usize; n + 1];
        for i in 0..n {
            off[i + 1] = off[i] + self.route(i).tds.len() + 1;
        }
        let mut plan = BTreeMap::new();
        let mut key: LexKey = Vec::with_capacity(n);
        for (i, t) in self.inst.trains.iter().enumerate() {
            let o = self.route(i);
            let occupations: Vec<Occupation> = o
                .tds
                .iter()
                .enumerate()
                .map(|(p, tds)| Occupation {
                    tds: tds.clone(),
                    start: prop.dist[off[i] + p],
                    end: prop.dist[off[i] + p + 1] + o.margin[p],
                })
                .collect();
            key.push((
                t.id.clone(),
                o.route_id.clone(),
                occupations.iter().map(|x| x.start).collect(),
            ));
            plan.insert(
                t.id.clone(),
                TimedPath {
                    train_id: t.id.clone(),
                    route_id: o.route_id.clone(),
                    occupations,
                },
            );
        }
        if self.pool.iter().any(|e| e.key == key) {
            return;
        }
        let entry = PoolEntry {
            value: prop.value,
            key,
            plan,
        };
        let pos = self
            .pool
            .partition_point(|e| (e.value, &e.key) < (entry.value, &entry.key));
        self.pool.insert(pos, entry);
        self.pool.truncate(self.cfg.pool_cap);
    }
}

/// Runs the branch-and-bound search on `inst`.
pub fn solve(inst: &SubInstance, cfg: &SolveCfg) -> Result<SolveResult> {
    inst.validate()?;
    if cfg.pool_cap == 0 {
        return Err(Error::InvalidInput("pool_cap must be at least 1".into()));
    }
    let mut search = Search::new(inst, cfg);
    search.dfs_routes(0);

    let best = search.best_value();
    let status = if search.truncated {
        SolveStatus::TimeLimit
    } else if best.is_none() {
        SolveStatus::Infeasible
    } else {
        SolveStatus::Optimal
    };
    let lower_bound = match (search.truncated, best) {
        (false, Some(b)) => b,
        (false, None) => 0.0,
        (true, Some(b)) => b.min(search.min_truncated_bound),
        (true, None) => {
            if search.min_truncated_bound.is_finite() {
                search.min_truncated_bound
            } else {
                0.0
            }
        }
    };
    let gap = match best {
        Some(b) if b > 0.0 => (b - lower_bound) / b,
        _ => 0.0,
    };
    let keep_thresh = best.map(|b| b * (1.0 + cfg.slack_pct / 100.0));
    let solutions = search
        .pool
        .into_iter()
        .filter(|e| keep_thresh.map_or(true, |t| e.value <= t))
        .map(|e| Solution {
            plan: e.plan,
            value: e.value,
        })
        .collect();
    Ok(SolveResult {
        solutions,
        lower_bound,
        status,
        gap,
        nodes: search.nodes_used,
    })
}

// ---------------------------------------------------------------------------
// Instance compilation
// ---------------------------------------------------------------------------

/// Compiles the tail of `route` from `start_idx` for `train`.
pub(crate) fn compile_route(
    world: &World,
    train: &Train,
    route: &Route,
    start_idx: usize,
) -> CompiledRoute {
    let n = route.tds_sequence.len();
    let mut tds = Vec::with_capacity(n - start_idx);
    let mut proc = Vec::with_capacity(n - start_idx);
    let mut margin = Vec::with_capacity(n - start_idx);
    for i in start_idx..n {
        let s = &route.tds_sequence[i];
        let dwell = if route.stop_points.contains(s) {
            train.min_dwell
        } else {
            0
        };
        tds.push(s.clone());
        proc.push(route.run_times[i] + dwell);
        let m = if i + 1 == n && train.stock_successor.is_some() {
            0
        } else {
            world.network.release_margin(s)
        };
        margin.push(m);
    }
    CompiledRoute {
        route_id: route.id.clone(),
        tds,
        proc,
        margin,
    }
}

/// Builds a sub-instance from a traffic state: `free` trains get all their
/// remaining route options, every other scoped train is constrained to its
/// planned route and must not exit later than its current plan.
pub fn build_instance(
    world: &World,
    ts: &TrafficState,
    rttp: &Rttp,
    free: &BTreeSet<TrainId>,
    weights: &BTreeMap<TrainId, f64>,
    objective: Objective,
) -> Result<SubInstance> {
    let mut trains = Vec::with_capacity(ts.trains.len());
    for (id, view) in &ts.trains {
        let train = world.train(id)?;
        let path = rttp
            .path(id)
            .ok_or_else(|| Error::InvalidInput(format!("plan misses scoped train {id}")))?;
        let entered = view.position.is_some();
        let start_idx = view.realized.len().saturating_sub(1);
        let is_free = free.contains(id);

        let mut options: Vec<CompiledRoute> = Vec::new();
        let mut push_route = |rid: &RouteId| -> Result<()> {
            let route = train.route(rid).ok_or_else(|| {
                Error::DanglingReference(format!("train {id} has no route {rid}"))
            })?;
            let compiled = compile_route(world, train, route, start_idx);
            if !options.iter().any(|o| o.tds == compiled.tds && o.proc == compiled.proc) {
                options.push(compiled);
            }
            Ok(())
        };
        push_route(&view.current_route)?;
        if is_free {
            let mut rest: Vec<&RouteId> = view
                .route_options
                .iter()
                .filter(|r| **r != view.current_route)
                .collect();
            rest.sort();
            for rid in rest {
                push_route(rid)?;
            }
        }

        let weight = match objective {
            Objective::UnweightedDelay => 1.0,
            Objective::WeightedDelay => *weights.get(id).ok_or_else(|| {
                Error::InvalidInput(format!("missing weight for scoped train {id}"))
            })?,
        };
        let release = if entered {
            view.entered_current_at
                .ok_or_else(|| Error::InvalidInput(format!("{id} inside without entry time")))?
        } else {
            view.expected_entry
                .ok_or_else(|| Error::InvalidInput(format!("{id} outside without entry estimate")))?
                .max(ts.now)
        };
        let stock_pred = if entered {
            None
        } else {
            train
                .stock_predecessor
                .as_ref()
                .filter(|p| ts.trains.contains_key(*p))
                .cloned()
        };
        trains.push(InstanceTrain {
            id: id.clone(),
            weight,
            sched_exit: train.scheduled_exit,
            release,
            entered,
            free: is_free,
            exit_cap: (!is_free).then(|| path_exit_time(world, path)),
            stock_pred,
            options,
        });
    }
    let inst = SubInstance {
        now: ts.now,
        objective,
        trains,
        fixed_orders: Vec::new(),
    };
    inst.validate()?;
    Ok(inst)
}

/// Builds a fixed-route instance covering every train of `rttp` (also the
/// ones beyond the traffic-state scope), each on exactly the route and
/// position its planned path encodes. Used by projection, repair, and the
/// first-arriver baseline.
/// A plan entry still matters for re-timing when its train is visible in
/// the traffic state or its path extends beyond the planning instant.
/// Trains that exited before the snapshot leave stale historical paths
/// behind until the next installation drops them; re-timing those would
/// push live traffic behind ghosts.
pub(crate) fn plan_train_is_live(ts: &TrafficState, id: &TrainId, path: &TimedPath) -> bool {
    ts.trains.contains_key(id)
        || path
            .occupations
            .last()
            .map_or(false, |o| o.end > ts.now)
}

pub fn instance_from_plan(
    world: &World,
    ts: &TrafficState,
    rttp: &Rttp,
    objective: Objective,
) -> Result<SubInstance> {
    let mut trains = Vec::with_capacity(rttp.paths.len());
    for (id, path) in &rttp.paths {
        if !plan_train_is_live(ts, id, path) {
            continue;
        }
        let train = world.train(id)?;
        let route = train.route(&path.route_id).ok_or_else(|| {
            Error::DanglingReference(format!("train {id} has no route {}", path.route_id))
        })?;
        let view = ts.trains.get(id);
        let entered = view.map_or(false, |v| v.position.is_some());
        // Drop occupations the train has already cleared; keep the current
        // section as the fixed head.
        let start_idx = match view {
            Some(v) if entered => {
                let pos = v.realized.len() - 1;
                route
                    .index_of(&v.realized[pos])
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("plan route of {id} misses its position"))
                    })?
            }
            _ => route
                .index_of(&path.occupations[0].tds)
                .ok_or_else(|| Error::InvalidInput(format!("path of {id} leaves its route")))?,
        };
        let release = match view {
            Some(v) if entered => v
                .entered_current_at
                .ok_or_else(|| Error::InvalidInput(format!("{id} inside without entry time")))?,
            Some(v) => v
                .expected_entry
                .ok_or_else(|| Error::InvalidInput(format!("{id} outside without entry estimate")))?
                .max(ts.now),
            None => path.entry().max(ts.now),
        };
        let stock_pred = if entered {
            None
        } else {
            train
                .stock_predecessor
                .as_ref()
                .filter(|p| {
                    rttp.path(p)
                        .map_or(false, |pp| plan_train_is_live(ts, p, pp))
                })
                .cloned()
        };
        trains.push(InstanceTrain {
            id: id.clone(),
            weight: 1.0,
            sched_exit: train.scheduled_exit,
            release,
            entered,
            free: false,
            exit_cap: None,
            stock_pred,
            options: vec![compile_route(world, train, route, start_idx)],
        });
    }
    let inst = SubInstance {
        now: ts.now,
        objective,
        trains,
        fixed_orders: Vec::new(),
    };
    inst.validate()?;
    Ok(inst)
}

/// All realized passing orders of a plan: ordered disjoint pairs per shared
/// section, as (first, second, tds, instant the order realizes) — the
/// realization instant being the first occupation start of the pair.
fn plan_order_pairs(rttp: &Rttp) -> Vec<(TrainId, TrainId, TdsId, Time)> {
    let mut by_tds: BTreeMap<&TdsId, Vec<(Time, Time, &TrainId)>> = BTreeMap::new();
    for (id, path) in &rttp.paths {
        for o in &path.occupations {
            by_tds.entry(&o.tds).or_default().push((o.start, o.end, id));
        }
    }
    let mut pairs = Vec::new();
    for (tds, mut users) in by_tds {
        users.sort();
        for i in 0..users.len() {
            for j in i + 1..users.len() {
                let (sa, ea, a) = users[i];
                let (sb, _, b) = users[j];
                if ea <= sb {
                    pairs.push(((*a).clone(), (*b).clone(), tds.clone(), sa.min(sb)));
                }
            }
        }
    }
    pairs
}

/// Re-times a plan from the current traffic state, keeping every route and
/// every passing order: the earliest schedule compatible with realized
/// positions and entry estimates. The result is conflict-free whenever the
/// input's orders are acyclic (always the case for previously installed
/// plans).
pub fn reproject(world: &World, ts: &TrafficState, rttp: &Rttp) -> Result<Rttp> {
    let any_live = rttp
        .paths
        .iter()
        .any(|(id, p)| plan_train_is_live(ts, id, p));
    if !any_live {
        return Ok(Rttp {
            paths: BTreeMap::new(),
            horizon_start: ts.now,
        });
    }
    let mut inst = instance_from_plan(world, ts, rttp, Objective::UnweightedDelay)?;
    inst.fixed_orders = plan_order_pairs(rttp)
        .into_iter()
        .filter(|(a, b, _, _)| {
            inst.train_index(a).is_some() && inst.train_index(b).is_some()
        })
        .map(|(first, second, tds, _)| FixedOrder {
            first,
            second,
            tds,
        })
        .collect();
    // With every order fixed the search walks straight to a leaf, but the
    // walk still costs one node per route level — budget by instance size.
    let cfg = SolveCfg {
        slack_pct: 0.0,
        pool_cap: 1,
        budget: Budget {
            nodes: 64 + 8 * inst.trains.len() as u64,
        },
    };
    let result = solve(&inst, &cfg)?;
    let best = result
        .best()
        .ok_or_else(|| Error::InvalidInput("plan projection found no schedule".into()))?;
    Ok(Rttp {
        paths: best.plan.clone(),
        horizon_start: ts.now,
    })
}

/// Orders every section by earliest feasible arrival, greedily in event
/// order, on fixed routes. Returns the resulting conflict-free plan.
pub fn greedy_first_arriver(inst: &SubInstance) -> Result<(BTreeMap<TrainId, TimedPath>, f64)> {
    inst.validate()?;
    let cfg = SolveCfg::default();
    let mut search = Search::new(inst, &cfg);
    loop {
        let Some(prop) = search.propagate() else {
            return Err(Error::InvalidInput(
                "first-arriver ordering ran into an infeasible wedge".into(),
            ));
        };
        let Some(pick) = prop.overlap else {
            search.offer(prop);
            let e = search.pool.into_iter().next().expect("offered just now");
            return Ok((e.plan, e.value));
        };
        let ((p, pp), (q, qp)) = if pick.a_first {
            ((pick.a, pick.a_pos), (pick.b, pick.b_pos))
        } else {
            ((pick.b, pick.b_pos), (pick.a, pick.a_pos))
        };
        let margin = search.inst.trains[p].options[0].margin[pp];
        search.decided.push(OrderEdge {
            first: p,
            first_pos: pp,
            second: q,
            second_pos: qp,
            margin,
        });
    }
}

// ---------------------------------------------------------------------------
// Costing
// ---------------------------------------------------------------------------

/// Weighted positive exit lateness of the given paths against the reference
/// timetable; trains without a weight entry count with the fallback.
pub fn plan_cost(
    world: &World,
    plan: &BTreeMap<TrainId, TimedPath>,
    weights: &BTreeMap<TrainId, f64>,
) -> Result<f64> {
    let mut cost = 0.0;
    for (id, path) in plan {
        let train = world.train(id)?;
        let exit = path_exit_time(world, path);
        let w = weights.get(id).copied().unwrap_or(1.0);
        cost += w * (exit - train.scheduled_exit).max(0) as f64;
    }
    Ok(cost)
}

// ---------------------------------------------------------------------------
// Hypotheses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Shared,
    CurrentRttp,
}

/// One train's proposal for itself and its neighbors: a conflict-free plan
/// fragment with a privately costed weighted delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub origin: TrainId,
    pub scope: BTreeSet<TrainId>,
    pub plan: BTreeMap<TrainId, TimedPath>,
    pub cost: f64,
    pub provenance: Provenance,
}

impl Hypothesis {
    /// Path the origin train proposes for itself.
    pub fn origin_path(&self) -> &TimedPath {
        &self.plan[&self.origin]
    }
}

#[derive(Debug, Clone)]
pub struct HypoCfg {
    /// Retention band: generated solutions within this percentage of the
    /// best are eligible.
    pub p: f64,
    /// Total hypothesis cap per train, the current-plan hypothesis included.
    pub h_bar: usize,
    pub budget: Budget,
}

impl Default for HypoCfg {
    fn default() -> Self {
        HypoCfg {
            p: 5.0,
            h_bar: 2,
            budget: Budget::default(),
        }
    }
}

fn restrict_plan(
    plan: &BTreeMap<TrainId, TimedPath>,
    scope: &BTreeSet<TrainId>,
) -> BTreeMap<TrainId, TimedPath> {
    plan.iter()
        .filter(|(id, _)| scope.contains(*id))
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect()
}

/// Optimizes the focal train together with its neighbors against the rest
/// of the scoped traffic as exit-capped constraints, and returns up to
/// `h_bar` hypotheses: the generated solutions within `p`% of the best plus
/// always the projection of the current plan. The boolean flags degraded
/// mode (search found nothing; only the current plan is returned).
pub fn generate_hypotheses(
    world: &World,
    ts: &TrafficState,
    rttp: &Rttp,
    focal: &TrainId,
    neighbors: &BTreeSet<TrainId>,
    weights: &BTreeMap<TrainId, f64>,
    cfg: &HypoCfg,
) -> Result<(Vec<Hypothesis>, bool)> {
    if !ts.trains.contains_key(focal) {
        return Err(Error::InvalidInput(format!(
            "focal train {focal} is not in the traffic state"
        )));
    }
    if cfg.h_bar == 0 {
        return Err(Error::InvalidInput("h_bar must be at least 1".into()));
    }
    let mut scope: BTreeSet<TrainId> = neighbors
        .iter()
        .filter(|t| ts.trains.contains_key(*t))
        .cloned()
        .collect();
    scope.insert(focal.clone());

    let mut current_plan = BTreeMap::new();
    for id in &scope {
        let path = rttp
            .path(id)
            .ok_or_else(|| Error::InvalidInput(format!("plan misses scoped train {id}")))?;
        current_plan.insert(id.clone(), path.clone());
    }
    let current = Hypothesis {
        id: format!("{focal}~cur"),
        origin: focal.clone(),
        scope: scope.clone(),
        plan: current_plan,
        cost: plan_cost(world, &restrict_plan(&rttp.paths, &scope), weights)?,
        provenance: Provenance::CurrentRttp,
    };

    let inst = build_instance(world, ts, rttp, &scope, weights, Objective::WeightedDelay)?;
    let solve_cfg = SolveCfg {
        slack_pct: cfg.p,
        pool_cap: cfg.h_bar + 8,
        budget: cfg.budget,
    };
    let result = solve(&inst, &solve_cfg)?;
    if result.solutions.is_empty() {
        return Ok((vec![current], true));
    }

    let mut generated: Vec<Hypothesis> = Vec::new();
    for sol in &result.solutions {
        let plan = restrict_plan(&sol.plan, &scope);
        if plan == current.plan || generated.iter().any(|h| h.plan == plan) {
            continue;
        }
        let cost = plan_cost(world, &plan, weights)?;
        generated.push(Hypothesis {
            id: format!("{focal}~gen{}", generated.len()),
            origin: focal.clone(),
            scope: scope.clone(),
            plan,
            cost,
            provenance: Provenance::Generated,
        });
    }
    let keep_generated = cfg.h_bar.saturating_sub(1);
    generated.truncate(keep_generated);
    let mut out = generated;
    out.push(current);
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((out, false))
}

/// Spreads generated and current-plan hypotheses along interaction edges:
/// each train appends, re-owned and re-costed with its own private weights,
/// every neighbor hypothesis whose plan differs from all of its own over its
/// scope. Received hypotheses never propagate further.
pub fn share_hypotheses(
    world: &World,
    all_h: &BTreeMap<TrainId, Vec<Hypothesis>>,
    edges: &[(TrainId, TrainId)],
    evaluators: &BTreeMap<TrainId, BTreeMap<TrainId, f64>>,
) -> Result<BTreeMap<TrainId, Vec<Hypothesis>>> {
    let mut out = all_h.clone();
    let mut sorted_edges: Vec<(TrainId, TrainId)> = edges.to_vec();
    sorted_edges.sort();
    for (x, y) in &sorted_edges {
        for (receiver, donor) in [(x, y), (y, x)] {
            let Some(donated) = all_h.get(donor) else {
                continue;
            };
            let receiver_scope: BTreeSet<TrainId> = match all_h.get(receiver) {
                Some(own) if !own.is_empty() => own[0].scope.clone(),
                _ => continue,
            };
            let weights = evaluators.get(receiver).ok_or_else(|| {
                Error::InvalidInput(format!("missing evaluator weights for {receiver}"))
            })?;
            // Fill-in source for scope trains the donor did not re-schedule:
            // the receiver's current-plan hypothesis, i.e. "unchanged".
            let fill: &BTreeMap<TrainId, TimedPath> = all_h
                .get(receiver)
                .and_then(|own| {
                    own.iter()
                        .find(|e| e.provenance == Provenance::CurrentRttp)
                        .or_else(|| own.first())
                })
                .map(|e| &e.plan)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("missing hypothesis pool for {receiver}"))
                })?;
            for (k, h) in donated.iter().enumerate() {
                if h.provenance == Provenance::Shared {
                    continue;
                }
                if !h.plan.contains_key(receiver) {
                    continue;
                }
                // Price the donated proposal over the receiver's full scope,
                // with uncovered trains kept at their current plan. Every
                // hypothesis in one pool then sums delay over the same train
                // set; otherwise a proposal that merely omits an expensive
                // neighbor from its scope looks cheapest and wins the vote.
                let mut plan = restrict_plan(&h.plan, &receiver_scope);
                for t in &receiver_scope {
                    if !plan.contains_key(t) {
                        if let Some(path) = fill.get(t) {
                            plan.insert(t.clone(), path.clone());
                        }
                    }
                }
                let scope: BTreeSet<TrainId> = plan.keys().cloned().collect();
                let own = out.get(receiver).expect("receiver initialized");
                let duplicate = own
                    .iter()
                    .any(|e| restrict_plan(&e.plan, &receiver_scope) == plan);
                if duplicate {
                    continue;
                }
                let cost = plan_cost(world, &plan, weights)?;
                let shared = Hypothesis {
                    id: format!("{receiver}~sh~{donor}~{k}"),
                    origin: receiver.clone(),
                    scope,
                    plan,
                    cost,
                    provenance: Provenance::Shared,
                };
                out.get_mut(receiver).expect("receiver initialized").push(shared);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Repair
// ---------------------------------------------------------------------------

/// Resolves every conflict of a possibly conflicting plan while keeping all
/// routes and, for the given consensus trains, every passing order that
/// realizes within `[now, now + t_h]`. Remaining orders are re-optimized
/// under unweighted total delay.
pub fn repair(
    world: &World,
    ts: &TrafficState,
    rttp: &Rttp,
    consensus: &BTreeSet<TrainId>,
    t_h: Secs,
    budget: Budget,
) -> Result<Rttp> {
    let now = ts.now;
    if rttp.paths.is_empty() {
        return Ok(rttp.clone());
    }

    // A short-term conflict between two consensus trains contradicts the
    // order-preservation constraint outright: no admissible order exists.
    let ids: Vec<&TrainId> = rttp.paths.keys().collect();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            if !(consensus.contains(*a) && consensus.contains(*b)) {
                continue;
            }
            if let Some(c) = crate::infra::paths_conflict(&rttp.paths[*a], &rttp.paths[*b]) {
                if c.overlap.0 <= now + t_h {
                    return Err(Error::RepairInfeasible(format!(
                        "consensus trains {a} and {b} clash at {} within the horizon",
                        c.tds
                    )));
                }
            }
        }
    }

    let mut inst = instance_from_plan(world, ts, rttp, Objective::UnweightedDelay)?;
    // Pin only orders between observed trains. A pair involving a train
    // beyond the traffic-state scope is no decision anyone took: the absent
    // train's projected slot just creeps forward with the clock, so such a
    // pin would re-enter the horizon every cycle and hold live traffic
    // behind a train that has yet to appear. The search stays free to put
    // either side first.
    inst.fixed_orders = plan_order_pairs(rttp)
        .into_iter()
        .filter(|(a, b, _, realized)| {
            inst.train_index(a).is_some()
                && inst.train_index(b).is_some()
                && (consensus.contains(a) || consensus.contains(b))
                && ts.trains.contains_key(a)
                && ts.trains.contains_key(b)
                && *realized >= now
                && *realized <= now + t_h
        })
        .map(|(first, second, tds, _)| FixedOrder {
            first,
            second,
            tds,
        })
        .collect();
    let cfg = SolveCfg {
        slack_pct: 0.0,
        pool_cap: 1,
        budget,
    };
    let result = solve(&inst, &cfg)?;
    match result.best() {
        Some(best) => Ok(Rttp {
            paths: best.plan.clone(),
            horizon_start: now,
        }),
        None => Err(Error::RepairInfeasible(format!(
            "no conflict-free ordering under fixed short-term orders (status {:?})",
            result.status
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{line_network, route, train, world_from};
    use crate::infra::{Category, Network};
    use crate::scenario::Scenario;
    use crate::sim::SimState;

    fn single_tds_train(id: &str, weight: f64, release: Time, run: Secs) -> InstanceTrain {
        InstanceTrain {
            id: id.into(),
            weight,
            sched_exit: release + run,
            release,
            entered: false,
            free: true,
            exit_cap: None,
            stock_pred: None,
            options: vec![CompiledRoute {
                route_id: format!("r_{id}").as_str().into(),
                tds: vec!["x".into()],
                proc: vec![run],
                margin: vec![0],
            }],
        }
    }

    #[test]
    fn weighted_order_choice_prefers_the_cheap_shift() {
        // a (w=2) wants x [0,60); b (w=1) wants x [30,90). Letting a pass
        // first shifts b by 30 (cost 30); the reverse shifts a by 90
        // (cost 180).
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: vec![
                single_tds_train("a", 2.0, 0, 60),
                single_tds_train("b", 1.0, 30, 60),
            ],
            fixed_orders: Vec::new(),
        };
        let res = solve(&inst, &SolveCfg::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        let best = res.best().unwrap();
        assert_eq!(best.value, 30.0);
        assert_eq!(res.lower_bound, 30.0);
        assert_eq!(res.gap, 0.0);
        let a = &best.plan[&TrainId::new("a")];
        let b = &best.plan[&TrainId::new("b")];
        assert_eq!(a.occupations[0].start, 0);
        assert_eq!(b.occupations[0].start, 60);
    }

    #[test]
    fn forced_reverse_order_costs_what_the_closed_form_says() {
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: vec![
                single_tds_train("a", 2.0, 0, 60),
                single_tds_train("b", 1.0, 30, 60),
            ],
            fixed_orders: vec![FixedOrder {
                first: "b".into(),
                second: "a".into(),
                tds: "x".into(),
            }],
        };
        let res = solve(&inst, &SolveCfg::default()).unwrap();
        assert_eq!(res.best().unwrap().value, 180.0);
    }

    #[test]
    fn three_trains_on_one_section_match_order_enumeration() {
        // Three trains over one shared section; brute-force all 6 orders
        // with direct sequential arithmetic.
        let trains = [("a", 3.0, 0), ("b", 1.0, 20), ("c", 2.0, 40)];
        let run = 60;
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: trains
                .iter()
                .map(|(id, w, rel)| single_tds_train(id, *w, *rel, run))
                .collect(),
            fixed_orders: Vec::new(),
        };
        let mut best = f64::INFINITY;
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            let mut t = 0i64;
            let mut cost = 0.0;
            for &i in &perm {
                let (_, w, rel) = trains[i];
                let start = t.max(rel);
                t = start + run;
                cost += w * (t - (rel + run)).max(0) as f64;
            }
            best = best.min(cost);
        }
        let res = solve(&inst, &SolveCfg::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert_eq!(res.best().unwrap().value, best);
    }

    #[test]
    fn scaling_weights_preserves_the_argmin() {
        let mk = |scale: f64| SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: vec![
                single_tds_train("a", 2.0 * scale, 0, 60),
                single_tds_train("b", 1.0 * scale, 30, 60),
            ],
            fixed_orders: Vec::new(),
        };
        let r1 = solve(&mk(1.0), &SolveCfg::default()).unwrap();
        let r7 = solve(&mk(7.0), &SolveCfg::default()).unwrap();
        assert_eq!(
            r1.best().unwrap().plan,
            r7.best().unwrap().plan
        );
        assert_eq!(r7.best().unwrap().value, 7.0 * r1.best().unwrap().value);
    }

    #[test]
    fn exit_cap_diverts_the_push_onto_the_free_train() {
        // b is constrained with its planned exit as cap; pushing it behind a
        // would violate the cap, so the solver must delay a instead even
        // though a is heavier.
        let mut b = single_tds_train("b", 1.0, 30, 60);
        b.free = false;
        b.exit_cap = Some(90);
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: vec![single_tds_train("a", 5.0, 0, 60), b],
            fixed_orders: Vec::new(),
        };
        let res = solve(&inst, &SolveCfg::default()).unwrap();
        let best = res.best().unwrap();
        let b_exit = best.plan[&TrainId::new("b")].occupations[0].end;
        assert!(b_exit <= 90);
        // a waits for b: starts when b clears, exits at 150 vs scheduled 60.
        assert_eq!(best.plan[&TrainId::new("a")].occupations[0].start, 90);
        assert_eq!(best.value, 5.0 * 90.0);
    }

    #[test]
    fn rerouting_over_a_siding_beats_the_queue() {
        // Two trains share the main line; the second has a slower siding
        // alternative that avoids queueing entirely and wins for small
        // detour cost.
        let network = Network::new(vec![
            crate::fixtures::tds("in_a", &["main"], false, 0),
            crate::fixtures::tds("in_b", &["main", "side"], false, 0),
            crate::fixtures::tds("main", &["out"], false, 0),
            crate::fixtures::tds("side", &["out_s"], false, 0),
            crate::fixtures::tds("out", &[], false, 0),
            crate::fixtures::tds("out_s", &[], false, 0),
        ])
        .unwrap();
        let ta = train(
            "a",
            Category::Freight,
            20.0,
            0,
            vec![route("a_main", &["in_a", "main", "out"], &[60, 120, 60], &[])],
            30,
        );
        let tb = train(
            "b",
            Category::Regional,
            30.0,
            120,
            vec![
                route("b_main", &["in_b", "main", "out"], &[60, 120, 60], &[]),
                route("b_side", &["in_b", "side", "out_s"], &[60, 150, 60], &[]),
            ],
            30,
        );
        let world = world_from(network, vec![ta, tb]).unwrap();
        let scenario = Scenario {
            world: world.clone(),
            entrance_delays: [(TrainId::new("a"), 0), (TrainId::new("b"), 0)]
                .into_iter()
                .collect(),
            seed: 0,
        };
        // b is scheduled on the main line right after a's slot; delaying a
        // by 120 s makes them contend for it.
        let state = SimState::new(&Scenario {
            entrance_delays: [(TrainId::new("a"), 120), (TrainId::new("b"), 0)]
                .into_iter()
                .collect(),
            ..scenario
        })
        .unwrap();
        let ts = state.emit_traffic_state(2400);
        let rttp = reproject(&world, &ts, state.rttp()).unwrap();
        let free: BTreeSet<TrainId> = ["a", "b"].into_iter().map(TrainId::new).collect();
        let weights: BTreeMap<TrainId, f64> =
            [("a".into(), 20.0), ("b".into(), 30.0)].into_iter().collect();
        let inst =
            build_instance(&world, &ts, &rttp, &free, &weights, Objective::WeightedDelay).unwrap();
        let res = solve(&inst, &SolveCfg::default()).unwrap();
        let best = res.best().unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert_eq!(
            best.plan[&TrainId::new("b")].route_id,
            RouteId::new("b_side")
        );
        // a pays only its entrance delay; b pays the 30 s detour.
        assert_eq!(best.value, 20.0 * 120.0 + 30.0 * 30.0);
    }

    #[test]
    fn zero_budget_times_out_without_solutions() {
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: vec![single_tds_train("a", 1.0, 0, 60)],
            fixed_orders: Vec::new(),
        };
        let res = solve(
            &inst,
            &SolveCfg {
                budget: Budget { nodes: 0 },
                ..SolveCfg::default()
            },
        )
        .unwrap();
        assert_eq!(res.status, SolveStatus::TimeLimit);
        assert!(res.solutions.is_empty());
    }

    #[test]
    fn truncated_lower_bound_is_admissible() {
        let trains = [("a", 3.0, 0), ("b", 1.0, 20), ("c", 2.0, 40), ("d", 1.5, 55)];
        let inst = SubInstance {
            now: 0,
            objective: Objective::WeightedDelay,
            trains: trains
                .iter()
                .map(|(id, w, rel)| single_tds_train(id, *w, *rel, 60))
                .collect(),
            fixed_orders: Vec::new(),
        };
        let full = solve(&inst, &SolveCfg::default()).unwrap();
        assert_eq!(full.status, SolveStatus::Optimal);
        let optimum = full.best().unwrap().value;
        for nodes in [1, 2, 4, 8, 16, 32] {
            let r = solve(
                &inst,
                &SolveCfg {
                    budget: Budget { nodes },
                    ..SolveCfg::default()
                },
            )
            .unwrap();
            assert!(
                r.lower_bound <= optimum + 1e-9,
                "lb {} exceeds optimum {optimum} at {nodes} nodes",
                r.lower_bound
            );
            if let Some(best) = r.best() {
                assert!(best.value >= optimum);
            }
        }
    }

    #[test]
    fn reprojection_keeps_routes_and_orders_and_is_conflict_free() {
        let network = line_network(&["s1", "s2", "s3"], 5);
        let mk = |id: &str, entry: Time| {
            train(
                id,
                Category::Regional,
                25.0,
                entry,
                vec![route(&format!("r_{id}"), &["s1", "s2", "s3"], &[60, 60, 60], &[])],
                30,
            )
        };
        let world = world_from(network, vec![mk("a", 0), mk("b", 100)]).unwrap();
        let scenario = Scenario {
            world: world.clone(),
            entrance_delays: [(TrainId::new("a"), 90), (TrainId::new("b"), 0)]
                .into_iter()
                .collect(),
            seed: 0,
        };
        let mut state = SimState::new(&scenario).unwrap();
        state.advance(95).unwrap();
        let ts = state.emit_traffic_state(2400);
        let projected = reproject(&world, &ts, state.rttp()).unwrap();
        assert!(crate::infra::validate_rttp(&world, &projected)
            .unwrap()
            .is_empty());
        // a entered s1 at 90 and holds it; its head occupation is fixed.
        let a = &projected.paths[&TrainId::new("a")];
        assert_eq!(a.occupations[0].tds.as_str(), "s1");
        assert_eq!(a.occupations[0].start, 90);
        // b still follows a as planned: its s1 entry waits for a + margin.
        let b = &projected.paths[&TrainId::new("b")];
        assert_eq!(b.occupations[0].start, 155);
    }

    #[test]
    fn reprojection_drops_exited_trains_instead_of_reviving_them() {
        let network = line_network(&["s1", "s2"], 0);
        let mk = |id: &str, entry: Time| {
            train(
                id,
                Category::Regional,
                25.0,
                entry,
                vec![route(&format!("r_{id}"), &["s1", "s2"], &[60, 60], &[])],
                30,
            )
        };
        let world = world_from(network, vec![mk("e", 0), mk("a", 1000)]).unwrap();
        // e's path is fully realized history; a is still pending far out.
        // Only a is visible in the snapshot.
        let rttp = state_of_record(&world);
        let ts = crate::sim::TrafficState {
            now: 600,
            trains: [(
                TrainId::new("a"),
                crate::sim::TrainView {
                    position: None,
                    entered_current_at: None,
                    expected_entry: Some(1000),
                    delay: 0,
                    realized: vec![],
                    current_route: "r_a".into(),
                    route_options: vec!["r_a".into()],
                },
            )]
            .into_iter()
            .collect(),
        };
        let projected = reproject(&world, &ts, &rttp).unwrap();
        // The exited train is gone, and the pending one keeps its times
        // instead of queuing behind a ghost shifted to the planning instant.
        assert!(!projected.paths.contains_key(&TrainId::new("e")));
        let a = &projected.paths[&TrainId::new("a")];
        assert_eq!(a.occupations[0].start, 1000);
        assert_eq!(a.occupations.last().unwrap().end, 1120);
    }

    /// The scheduled paths of every train, as an installed plan.
    fn state_of_record(world: &World) -> Rttp {
        let scenario = Scenario {
            world: world.clone(),
            entrance_delays: BTreeMap::new(),
            seed: 0,
        };
        let state = SimState::new(&scenario).unwrap();
        state.rttp().clone()
    }

    #[test]
    fn hypothesis_generation_on_optimal_traffic_dedupes_to_the_current_plan() {
        let world = {
            let network = line_network(&["s1", "s2"], 0);
            let t = train(
                "t",
                Category::Regional,
                25.0,
                0,
                vec![route("r", &["s1", "s2"], &[60, 60], &[])],
                30,
            );
            world_from(network, vec![t]).unwrap()
        };
        let scenario = Scenario {
            world: world.clone(),
            entrance_delays: [(TrainId::new("t"), 0)].into_iter().collect(),
            seed: 0,
        };
        let state = SimState::new(&scenario).unwrap();
        let ts = state.emit_traffic_state(2400);
        let rttp = reproject(&world, &ts, state.rttp()).unwrap();
        let weights: BTreeMap<TrainId, f64> = [("t".into(), 25.0)].into_iter().collect();
        let (hs, degraded) = generate_hypotheses(
            &world,
            &ts,
            &rttp,
            &TrainId::new("t"),
            &BTreeSet::new(),
            &weights,
            &HypoCfg::default(),
        )
        .unwrap();
        assert!(!degraded);
        assert_eq!(hs.len(), 1);
        assert_eq!(hs[0].provenance, Provenance::CurrentRttp);
        assert_eq!(hs[0].cost, 0.0);
        assert_eq!(hs[0].plan[&TrainId::new("t")], rttp.paths[&TrainId::new("t")]);
    }

    #[test]
    fn repair_flags_short_term_consensus_clashes_and_fixes_far_ones() {
        let network = line_network(&["s1", "s2"], 0);
        let mk = |id: &str, entry: Time| {
            train(
                id,
                Category::Regional,
                25.0,
                entry,
                vec![route(&format!("r_{id}"), &["s1", "s2"], &[60, 60], &[])],
                30,
            )
        };
        let world = world_from(network, vec![mk("a", 0), mk("b", 2000)]).unwrap();
        let scenario = Scenario {
            world: world.clone(),
            entrance_delays: BTreeMap::new(),
            seed: 0,
        };
        let state = SimState::new(&scenario).unwrap();
        let ts = state.emit_traffic_state(10_000);
        // Corrupt the plan: b's path moved onto a's slot.
        let mut broken = state.rttp().clone();
        let a_path = broken.paths[&TrainId::new("a")].clone();
        let b = broken.paths.get_mut(&TrainId::new("b")).unwrap();
        for (o, oa) in b.occupations.iter_mut().zip(&a_path.occupations) {
            o.start = oa.start + 10;
            o.end = oa.end + 10;
        }
        let both: BTreeSet<TrainId> = ["a", "b"].into_iter().map(TrainId::new).collect();
        let err = repair(&world, &ts, &broken, &both, 900, Budget::default()).unwrap_err();
        assert!(matches!(err, Error::RepairInfeasible(_)));
        // With no consensus constraint the same clash is repairable.
        let fixed = repair(&world, &ts, &broken, &BTreeSet::new(), 900, Budget::default()).unwrap();
        assert!(crate::infra::validate_rttp(&world, &fixed).unwrap().is_empty());
    }

    #[test]
    fn reprojection_scales_to_wide_plans() {
        // Re-timing walks one search node per train even though every branch
        // is forced, so the projection budget has to grow with the plan.  A
        // fixed small budget silently starved 15+-train plans and left the
        // closed loop running stale schedules.
        let scenario = crate::fixtures::corridor_scenario(52).unwrap();
        let state = SimState::new(&scenario).unwrap();
        let ts = state.emit_traffic_state(2400);
        let plan = state.rttp();
        assert_eq!(plan.paths.len(), 18);
        let projected = reproject(&scenario.world, &ts, plan).unwrap();
        assert_eq!(projected.paths.len(), plan.paths.len());
        assert!(crate::infra::validate_rttp(&scenario.world, &projected)
            .unwrap()
            .is_empty());
    }
}
