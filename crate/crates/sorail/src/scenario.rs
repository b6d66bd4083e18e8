//! Experiment-input preparation: timetable compression, partitioning of
//! through-trains at their stops into stock-linked legs, and seeded
//! entrance-delay sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infra::{
    interval_overlap, occupation_intervals, Network, Occupation, Route, RouteId, Secs, TdsId,
    Time, TimedPath, Timetable, Train, TrainId, World,
};

/// A fully prepared experiment input: the world to simulate plus the sampled
/// entrance delay of every train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: World,
    /// Sampled entrance delay per train (seconds, ≥ 0). Legs that take over
    /// rolling stock inside the area carry 0; their perturbation propagates
    /// through the stock link.
    pub entrance_delays: BTreeMap<TrainId, Secs>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Timetable compression
// ---------------------------------------------------------------------------

/// Compresses a timetable into the dense conflict-free reference against
/// which delays are measured. Every path is rebuilt with minimal dwells
/// (exactly `min_dwell` at each stop) and no traffic-induced waiting, then
/// shifted to the earliest time ≥ 0 that keeps occupations disjoint and
/// preserves every original passing order. Trains are placed greedily in
/// nondecreasing original entry order.
///
/// Scheduled entry/exit times of the returned train records are rewritten to
/// the compressed times.
pub fn compress_timetable(network: &Network, tt: &Timetable) -> Result<Timetable> {
    // Original passing orders: (a, b, tds) -> a passes first, for a < b.
    let mut original_order: BTreeMap<(TrainId, TrainId, TdsId), bool> = BTreeMap::new();
    let ids: Vec<&TrainId> = tt.scheduled_paths.keys().collect();
    for (i, a) in ids.iter().enumerate() {
        for b in ids.iter().skip(i + 1) {
            let pa = &tt.scheduled_paths[*a];
            let pb = &tt.scheduled_paths[*b];
            for oa in &pa.occupations {
                for ob in &pb.occupations {
                    if oa.tds == ob.tds {
                        let a_first = (oa.start, *a) < (ob.start, *b);
                        original_order
                            .insert(((*a).clone(), (*b).clone(), oa.tds.clone()), a_first);
                    }
                }
            }
        }
    }

    // Rigid zero-based shapes: unimpeded projection with minimal dwells.
    let mut shapes: BTreeMap<TrainId, TimedPath> = BTreeMap::new();
    for (id, path) in &tt.scheduled_paths {
        let train = tt
            .train(id)
            .ok_or_else(|| Error::DanglingReference(format!("path for unknown train {id}")))?;
        let route = train.route(&path.route_id).ok_or_else(|| Error::InvalidRoute {
            train: id.clone(),
            route: path.route_id.clone(),
            reason: "scheduled path uses a foreign route".into(),
        })?;
        let dwells = route.min_dwell_plan(train.min_dwell);
        shapes.insert(
            id.clone(),
            occupation_intervals(network, train, &path.route_id, 0, &dwells)?,
        );
    }

    // Greedy placement in nondecreasing original entry order.
    let mut order: Vec<&TrainId> = tt.scheduled_paths.keys().collect();
    order.sort_by_key(|id| (tt.scheduled_paths[*id].entry(), (*id).clone()));

    let mut placed: BTreeMap<TrainId, TimedPath> = BTreeMap::new();
    for id in order {
        let shape = &shapes[id];
        let mut lo: Time = 0;
        let mut hi: Time = Time::MAX;
        for (other_id, other_path) in &placed {
            for mine in &shape.occupations {
                for theirs in &other_path.occupations {
                    if mine.tds != theirs.tds {
                        continue;
                    }
                    let key_ab = (id.clone(), other_id.clone(), mine.tds.clone());
                    let key_ba = (other_id.clone(), id.clone(), mine.tds.clone());
                    let i_first = match (original_order.get(&key_ab), original_order.get(&key_ba)) {
                        (Some(&f), _) => f,
                        (_, Some(&f)) => !f,
                        // Both will occupy the TDS but did not in the input:
                        // impossible, routes are unchanged.
                        _ => unreachable!("shared TDS without an original order"),
                    };
                    if i_first {
                        // My occupation must end before theirs starts:
                        // shift + mine.end ≤ theirs.start.
                        hi = hi.min(theirs.start - mine.end);
                    } else {
                        // I enter after they release: shift + mine.start ≥ theirs.end.
                        lo = lo.max(theirs.end - mine.start);
                    }
                }
            }
        }
        if lo > hi {
            return Err(Error::CompressionInfeasible {
                train: id.clone(),
                reason: "no shift satisfies the original passing orders".into(),
            });
        }
        let mut path = shape.clone();
        for o in &mut path.occupations {
            o.start += lo;
            o.end += lo;
        }
        placed.insert(id.clone(), path);
    }

    // Rewrite the train records against the compressed times.
    let mut trains = tt.trains.clone();
    for (id, path) in &placed {
        let train = trains.get_mut(id).expect("validated above");
        train.scheduled_entry = path.entry();
        let last = path.occupations.last().expect("routes are nonempty");
        let margin = if train.stock_successor.is_some() {
            0
        } else {
            network.release_margin(&last.tds)
        };
        train.scheduled_exit = last.end - margin;
    }
    Ok(Timetable {
        trains,
        scheduled_paths: placed,
    })
}

// ---------------------------------------------------------------------------
// Partitioning at stops
// ---------------------------------------------------------------------------

/// Splits every train with intermediate stops into one leg per inter-stop
/// segment, chained by rolling-stock links. Leg `j+1` starts on the arrival
/// TDS of leg `j`; its first "run time" is the dwell observed at that stop,
/// so a successor never departs earlier than the predecessor's arrival plus
/// the stock reutilization time. Concatenating the legs' scheduled paths
/// reproduces the original occupations exactly.
pub fn partition_trains(network: &Network, tt: &Timetable) -> Result<Timetable> {
    let mut out = Timetable::default();
    for (id, train) in &tt.trains {
        let path = tt
            .scheduled_paths
            .get(id)
            .ok_or_else(|| Error::DanglingReference(format!("no scheduled path for {id}")))?;
        let route = train.route(&path.route_id).expect("validated timetable");
        // Interior stop indices split the route; boundary stops stay with
        // their leg.
        let splits: Vec<usize> = route
            .tds_sequence
            .iter()
            .enumerate()
            .filter(|(i, tds)| {
                *i > 0 && *i + 1 < route.tds_sequence.len() && route.stop_points.contains(tds)
            })
            .map(|(i, _)| i)
            .collect();
        for idx in &splits {
            let tds = &route.tds_sequence[*idx];
            if !network.tds(tds).map_or(false, |t| t.station_stop) {
                return Err(Error::InvalidStop {
                    train: id.clone(),
                    tds: tds.clone(),
                });
            }
        }
        if splits.is_empty() {
            out.trains.insert(id.clone(), train.clone());
            out.scheduled_paths.insert(id.clone(), path.clone());
            continue;
        }

        let k = splits.len();
        let mut bounds = Vec::with_capacity(k + 2);
        bounds.push(0usize);
        bounds.extend(&splits);
        bounds.push(route.tds_sequence.len() - 1);

        // Observed dwell at each split, from the scheduled path: the time at
        // the stop beyond the pure traversal.
        let dwell_at = |idx: usize| -> Secs {
            let enter = path.occupations[idx].start;
            let leave = path.occupations[idx + 1].start;
            leave - enter - route.run_times[idx]
        };

        let leg_id = |j: usize| TrainId::new(format!("{id}#{j}"));
        for j in 0..=k {
            let b = bounds[j];
            let e = bounds[j + 1];
            let is_first = j == 0;
            let is_last = j == k;
            let arrival_b = path.occupations[b].start + if is_first { 0 } else { route.run_times[b] };
            let arrival_e = path.occupations[e].start + route.run_times[e];

            // Route alternatives for this leg: segments of the original
            // alternatives between the same boundary sections.
            let s_b = &route.tds_sequence[b];
            let s_e = &route.tds_sequence[e];
            let mut legs_routes: Vec<Route> = Vec::new();
            let mut scheduled_leg_route: Option<RouteId> = None;
            for alt in &train.routes {
                let (Some(pb), Some(pe)) = (alt.index_of(s_b), alt.index_of(s_e)) else {
                    continue;
                };
                if pb >= pe {
                    continue;
                }
                let seq: Vec<TdsId> = alt.tds_sequence[pb..=pe].to_vec();
                let mut runs: Vec<Secs> = alt.run_times[pb..=pe].to_vec();
                if !is_first {
                    // Turnaround: the leg starts standing at the platform.
                    runs[0] = dwell_at(b);
                }
                let stops = alt
                    .stop_points
                    .iter()
                    .filter(|t| {
                        (is_first && *t == &seq[0] && b == 0)
                            || (is_last && *t == seq.last().unwrap())
                    })
                    .cloned()
                    .collect();
                let candidate = Route {
                    id: RouteId::new(format!("{}#{}", alt.id, j)),
                    tds_sequence: seq,
                    run_times: runs,
                    stop_points: stops,
                };
                let duplicate = legs_routes.iter().any(|r| {
                    r.tds_sequence == candidate.tds_sequence && r.run_times == candidate.run_times
                });
                if alt.id == route.id {
                    scheduled_leg_route = Some(candidate.id.clone());
                }
                if !duplicate || alt.id == route.id {
                    if !duplicate {
                        legs_routes.push(candidate);
                    }
                }
            }
            let scheduled_leg_route =
                scheduled_leg_route.expect("the scheduled route always yields its own segment");

            // Scheduled occupations of the leg, cut from the original path.
            let mut occs: Vec<Occupation> = Vec::with_capacity(e - b + 1);
            for i in b..=e {
                let mut o = path.occupations[i].clone();
                if i == b && !is_first {
                    o.start = arrival_b;
                }
                if i == e && !is_last {
                    o.end = arrival_e;
                }
                occs.push(o);
            }

            let new_id = leg_id(j);
            out.scheduled_paths.insert(
                new_id.clone(),
                TimedPath {
                    train_id: new_id.clone(),
                    route_id: scheduled_leg_route,
                    occupations: occs,
                },
            );
            out.trains.insert(
                new_id.clone(),
                Train {
                    id: new_id.clone(),
                    category: train.category,
                    weight: train.weight,
                    scheduled_entry: if is_first { path.entry() } else { arrival_b },
                    scheduled_exit: if is_last {
                        train.scheduled_exit
                    } else {
                        arrival_e
                    },
                    routes: legs_routes,
                    stock_predecessor: (!is_first).then(|| leg_id(j - 1)),
                    stock_successor: (!is_last).then(|| leg_id(j + 1)),
                    min_dwell: train.min_dwell,
                },
            );
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Entrance-delay perturbation
// ---------------------------------------------------------------------------

/// The fixed entrance-delay bins, in minutes: a point mass at zero and five
/// half-open ranges up to three hours.
pub const DELAY_BINS_MIN: [(u32, u32); 6] = [(0, 0), (0, 5), (5, 15), (15, 30), (30, 60), (60, 180)];

/// Bucket group a train draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketGroup {
    Passenger,
    Freight,
}

/// One row of the perturbation model: bin probabilities for a category group
/// at an entry point (`None` = default row for the group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub group: BucketGroup,
    pub entry_point: Option<TdsId>,
    /// Probability per bin of [`DELAY_BINS_MIN`].
    pub probs: [f64; 6],
}

/// Piecewise-uniform entrance-delay distributions keyed by category group
/// and entry point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    pub rows: Vec<BucketRow>,
}

impl PerturbationModel {
    pub fn new(rows: Vec<BucketRow>) -> Result<Self> {
        for row in &rows {
            let sum: f64 = row.probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "bucket probabilities for {:?}/{:?} sum to {sum}",
                    row.group, row.entry_point
                )));
            }
            if row.probs.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidInput("negative bucket probability".into()));
            }
        }
        Ok(PerturbationModel { rows })
    }

    /// The observed distributions of the reference corridor: per-group rows
    /// for the two entry points named `segrate` and `ospitaletto`, plus
    /// group defaults (the `segrate` row) for networks with other entries.
    pub fn reference() -> Self {
        let seg_pass = [0.24, 0.47, 0.24, 0.03, 0.01, 0.01];
        let seg_freight = [0.28, 0.07, 0.10, 0.11, 0.17, 0.27];
        let osp_pass = [0.07, 0.65, 0.21, 0.04, 0.01, 0.02];
        let osp_freight = [0.31, 0.05, 0.11, 0.15, 0.14, 0.24];
        let row = |group, entry: Option<&str>, probs| BucketRow {
            group,
            entry_point: entry.map(TdsId::from),
            probs,
        };
        PerturbationModel::new(vec![
            row(BucketGroup::Passenger, Some("segrate"), seg_pass),
            row(BucketGroup::Freight, Some("segrate"), seg_freight),
            row(BucketGroup::Passenger, Some("ospitaletto"), osp_pass),
            row(BucketGroup::Freight, Some("ospitaletto"), osp_freight),
            row(BucketGroup::Passenger, None, seg_pass),
            row(BucketGroup::Freight, None, seg_freight),
        ])
        .expect("reference rows are normalized")
    }

    /// Degenerate model: every train enters exactly on time.
    pub fn punctual() -> Self {
        let probs = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        PerturbationModel::new(vec![
            BucketRow {
                group: BucketGroup::Passenger,
                entry_point: None,
                probs,
            },
            BucketRow {
                group: BucketGroup::Freight,
                entry_point: None,
                probs,
            },
        ])
        .expect("normalized")
    }

    pub fn row_for(&self, group: BucketGroup, entry: &TdsId) -> Result<&BucketRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.entry_point.as_ref() == Some(entry))
            .or_else(|| {
                self.rows
                    .iter()
                    .find(|r| r.group == group && r.entry_point.is_none())
            })
            .ok_or_else(|| Error::ModelIncomplete(format!("{group:?} entering at {entry}")))
    }
}

fn draw_delay(row: &BucketRow, u_bin: f64, u_in: f64) -> Secs {
    let mut acc = 0.0;
    let mut chosen = DELAY_BINS_MIN.len() - 1;
    for (i, p) in row.probs.iter().enumerate() {
        acc += p;
        if u_bin < acc {
            chosen = i;
            break;
        }
    }
    let (lo_min, hi_min) = DELAY_BINS_MIN[chosen];
    if lo_min == hi_min {
        return 0;
    }
    // Uniform integer seconds in (lo, hi] minutes.
    let lo_s = Secs::from(lo_min) * 60;
    let hi_s = Secs::from(hi_min) * 60;
    let span = (hi_s - lo_s) as f64;
    let offset = (u_in * span).floor() as Secs;
    lo_s + 1 + offset.min(hi_s - lo_s - 1)
}

/// Samples an entrance delay for every train of the timetable. Draws are
/// independent per train, in sorted train-id order from a single seeded
/// stream; legs with a stock predecessor enter from inside the area and get
/// delay 0.
pub fn sample_perturbation(
    world: World,
    model: &PerturbationModel,
    seed: u64,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delays = BTreeMap::new();
    for (id, train) in &world.timetable.trains {
        // Two draws per train regardless of outcome keeps the stream aligned.
        let u_bin: f64 = rng.gen();
        let u_in: f64 = rng.gen();
        if train.stock_predecessor.is_some() {
            delays.insert(id.clone(), 0);
            continue;
        }
        let group = if train.category.is_passenger() {
            BucketGroup::Passenger
        } else {
            BucketGroup::Freight
        };
        let entry = train.routes[0].origin();
        let row = model.row_for(group, entry)?;
        delays.insert(id.clone(), draw_delay(row, u_bin, u_in));
    }
    Ok(Scenario {
        world,
        entrance_delays: delays,
        seed,
    })
}

/// Sanity check used by tests and the loader: scheduled paths are mutually
/// conflict-free.
pub fn assert_conflict_free(tt: &Timetable) -> Result<()> {
    let paths: Vec<&TimedPath> = tt.scheduled_paths.values().collect();
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            for oa in &paths[i].occupations {
                for ob in &paths[j].occupations {
                    if oa.tds == ob.tds
                        && interval_overlap((oa.start, oa.end), (ob.start, ob.end)).is_some()
                    {
                        return Err(Error::InvalidInput(format!(
                            "scheduled paths of {} and {} overlap on {}",
                            paths[i].train_id, paths[j].train_id, oa.tds
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}
