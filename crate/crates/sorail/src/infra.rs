//! Core infrastructure model: track detection sections, routes, trains, and
//! the timed-occupation calculus that everything else builds on.
//!
//! A train's movement is a [`TimedPath`]: one half-open occupation interval
//! `[start, end)` per TDS of its route. The model is single-occupancy — a
//! train occupies exactly one TDS at a time, and the occupation of TDS `i`
//! ends when the train has entered TDS `i+1`, plus that section's release
//! margin. Touching intervals do not conflict.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamp in integer seconds from the scenario origin.
pub type Time = i64;
/// Duration in integer seconds.
pub type Secs = i64;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_type!(
    /// Identifier of a track detection section.
    TdsId
);
id_type!(
    /// Identifier of a route (an ordered TDS sequence with run times).
    RouteId
);
id_type!(
    /// Identifier of a train.
    TrainId
);

/// A track detection section: the granularity at which occupation and
/// conflicts are modelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tds {
    pub id: TdsId,
    /// Sections a train may enter next.
    #[serde(default)]
    pub successors: Vec<TdsId>,
    /// Whether trains may be scheduled to stop here (platform track).
    #[serde(default)]
    pub station_stop: bool,
    /// Extra seconds the section stays blocked after the train has left.
    #[serde(default)]
    pub release_margin: Secs,
}

/// An ordered TDS sequence a train can follow, with fixed per-section run
/// times and the subset of sections where it is scheduled to stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub id: RouteId,
    pub tds_sequence: Vec<TdsId>,
    /// Traversal time per section, parallel to `tds_sequence`.
    pub run_times: Vec<Secs>,
    #[serde(default)]
    pub stop_points: BTreeSet<TdsId>,
}

impl Route {
    /// Index of the first occurrence of `tds` on this route.
    pub fn index_of(&self, tds: &TdsId) -> Option<usize> {
        self.tds_sequence.iter().position(|t| t == tds)
    }

    pub fn origin(&self) -> &TdsId {
        &self.tds_sequence[0]
    }

    pub fn destination(&self) -> &TdsId {
        self.tds_sequence.last().expect("routes are nonempty")
    }

    /// Dwell plan holding exactly the minimum dwell at every stop point.
    pub fn min_dwell_plan(&self, min_dwell: Secs) -> BTreeMap<TdsId, Secs> {
        self.stop_points
            .iter()
            .map(|t| (t.clone(), min_dwell))
            .collect()
    }
}

/// Commercial category of a train; determines its delay-weight interval and
/// which perturbation bucket group applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Freight,
    Regional,
    Intercity,
    Highspeed,
    EmptyRide,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Freight,
        Category::Regional,
        Category::Intercity,
        Category::Highspeed,
        Category::EmptyRide,
    ];

    /// Admissible delay-weight interval (EUR/minute-scale units).
    pub fn weight_interval(self) -> (f64, f64) {
        match self {
            Category::Freight => (15.0, 24.0),
            Category::Regional => (21.0, 36.0),
            Category::Intercity => (19.0, 27.0),
            Category::Highspeed => (24.0, 40.0),
            Category::EmptyRide => (15.0, 18.0),
        }
    }

    /// Interval midpoint: the "educated guess" a train uses for the private
    /// weight of another operator's train.
    pub fn midpoint_weight(self) -> f64 {
        let (lo, hi) = self.weight_interval();
        (lo + hi) / 2.0
    }

    /// Group used by the perturbation model. Empty rides are moved passenger
    /// stock, so they draw from the passenger distribution.
    pub fn is_passenger(self) -> bool {
        !matches!(self, Category::Freight)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Freight => "freight",
            Category::Regional => "regional",
            Category::Intercity => "intercity",
            Category::Highspeed => "highspeed",
            Category::EmptyRide => "empty_ride",
        };
        f.write_str(s)
    }
}

/// A train service (after partitioning: one leg of a stock rotation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Train {
    pub id: TrainId,
    pub category: Category,
    /// Private delay weight; must lie in the category's interval.
    pub weight: f64,
    /// Planned entry to the control area (start of the first occupation).
    pub scheduled_entry: Time,
    /// Planned exit from the control area (clearing the last TDS).
    pub scheduled_exit: Time,
    /// Admissible routes; all share origin and destination.
    pub routes: Vec<Route>,
    /// Previous leg using the same rolling stock, if any.
    #[serde(default)]
    pub stock_predecessor: Option<TrainId>,
    /// Next leg using the same rolling stock, if any.
    #[serde(default)]
    pub stock_successor: Option<TrainId>,
    /// Minimum dwell at scheduled stops, and minimum stock turnaround.
    pub min_dwell: Secs,
}

impl Train {
    pub fn route(&self, id: &RouteId) -> Option<&Route> {
        self.routes.iter().find(|r| &r.id == id)
    }
}

/// One half-open occupation interval `[start, end)` of a TDS.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Occupation {
    pub tds: TdsId,
    pub start: Time,
    pub end: Time,
}

impl Occupation {
    pub fn overlap(&self, other: &Occupation) -> Option<(Time, Time)> {
        interval_overlap((self.start, self.end), (other.start, other.end))
    }
}

/// Positive-measure intersection of two half-open intervals.
pub fn interval_overlap(a: (Time, Time), b: (Time, Time)) -> Option<(Time, Time)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo < hi).then_some((lo, hi))
}

/// A train's planned or realized movement: its route and one occupation per
/// traversed TDS, in traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPath {
    pub train_id: TrainId,
    pub route_id: RouteId,
    pub occupations: Vec<Occupation>,
}

impl TimedPath {
    /// Start of the first occupation (entry to the control area, or to the
    /// current TDS for a partially realized path).
    pub fn entry(&self) -> Time {
        self.occupations.first().map_or(0, |o| o.start)
    }

    pub fn occupation_of(&self, tds: &TdsId) -> impl Iterator<Item = &Occupation> {
        let tds = tds.clone();
        self.occupations.iter().filter(move |o| o.tds == tds)
    }
}

/// Real-time traffic plan: the path every train is currently meant to
/// follow. Passing orders at a TDS are implied by occupation start times.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Rttp {
    pub paths: BTreeMap<TrainId, TimedPath>,
    /// Instant the plan was computed for.
    pub horizon_start: Time,
}

impl Rttp {
    pub fn path(&self, train: &TrainId) -> Option<&TimedPath> {
        self.paths.get(train)
    }
}

/// The fixed infrastructure: the set of TDSs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    tds: BTreeMap<TdsId, Tds>,
}

impl Network {
    pub fn new(sections: Vec<Tds>) -> Result<Self> {
        let mut tds = BTreeMap::new();
        for s in sections {
            if tds.insert(s.id.clone(), s.clone()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate TDS id {}", s.id)));
            }
        }
        for s in tds.values() {
            for succ in &s.successors {
                if !tds.contains_key(succ) {
                    return Err(Error::DanglingReference(format!(
                        "TDS {} lists unknown successor {succ}",
                        s.id
                    )));
                }
            }
        }
        Ok(Network { tds })
    }

    pub fn tds(&self, id: &TdsId) -> Option<&Tds> {
        self.tds.get(id)
    }

    pub fn sections(&self) -> impl Iterator<Item = &Tds> {
        self.tds.values()
    }

    pub fn release_margin(&self, id: &TdsId) -> Secs {
        self.tds.get(id).map_or(0, |t| t.release_margin)
    }

    pub fn contains(&self, id: &TdsId) -> bool {
        self.tds.contains_key(id)
    }

    /// Checks that `route` is a chain under the successor relation, its
    /// arrays line up, run times are positive, and stops are station TDSs.
    pub fn validate_route(&self, train: &TrainId, route: &Route) -> Result<()> {
        let bad = |reason: String| Error::InvalidRoute {
            train: train.clone(),
            route: route.id.clone(),
            reason,
        };
        if route.tds_sequence.is_empty() {
            return Err(bad("empty TDS sequence".into()));
        }
        if route.run_times.len() != route.tds_sequence.len() {
            return Err(bad("run_times length differs from tds_sequence".into()));
        }
        if let Some(rt) = route.run_times.iter().find(|&&rt| rt <= 0) {
            return Err(bad(format!("non-positive run time {rt}")));
        }
        // A route visits each section at most once; passing orders at a TDS
        // are then a plain sequence of trains.
        let distinct: BTreeSet<&TdsId> = route.tds_sequence.iter().collect();
        if distinct.len() != route.tds_sequence.len() {
            return Err(bad("route visits a TDS more than once".into()));
        }
        for (i, tds) in route.tds_sequence.iter().enumerate() {
            if !self.contains(tds) {
                return Err(Error::DanglingReference(format!(
                    "route {} references unknown TDS {tds}",
                    route.id
                )));
            }
            if i > 0 {
                let prev = &route.tds_sequence[i - 1];
                let linked = self
                    .tds(prev)
                    .map_or(false, |p| p.successors.contains(tds));
                if !linked {
                    return Err(bad(format!("{prev} does not link to {tds}")));
                }
            }
        }
        for stop in &route.stop_points {
            let on_route = route.tds_sequence.contains(stop);
            if !on_route {
                return Err(bad(format!("stop point {stop} not on route")));
            }
            if !self.tds(stop).map_or(false, |t| t.station_stop) {
                return Err(Error::InvalidStop {
                    train: train.clone(),
                    tds: stop.clone(),
                });
            }
        }
        Ok(())
    }
}

/// The operated timetable: train records plus their planned paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timetable {
    pub trains: BTreeMap<TrainId, Train>,
    pub scheduled_paths: BTreeMap<TrainId, TimedPath>,
}

impl Timetable {
    pub fn train(&self, id: &TrainId) -> Option<&Train> {
        self.trains.get(id)
    }
}

/// Network plus timetable: the ambient context most operations need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub network: Network,
    pub timetable: Timetable,
}

impl World {
    pub fn train(&self, id: &TrainId) -> Result<&Train> {
        self.timetable
            .trains
            .get(id)
            .ok_or_else(|| Error::DanglingReference(format!("unknown train {id}")))
    }
}

/// Builds the unimpeded timed path of `train` along `route_id`: occupations
/// accumulate `run_time + dwell` per TDS from `entry_time`, and each
/// occupation extends past the move to the next section by the section's
/// release margin.
///
/// `dwell_plan` must hold a dwell of at least `train.min_dwell` for every
/// stop point of the route and nothing (or zero) elsewhere.
pub fn occupation_intervals(
    network: &Network,
    train: &Train,
    route_id: &RouteId,
    entry_time: Time,
    dwell_plan: &BTreeMap<TdsId, Secs>,
) -> Result<TimedPath> {
    let route = train.route(route_id).ok_or_else(|| Error::InvalidRoute {
        train: train.id.clone(),
        route: route_id.clone(),
        reason: "not a route of this train".into(),
    })?;
    let dwell_err = |tds: &TdsId, reason: String| Error::InvalidDwell {
        train: train.id.clone(),
        tds: tds.clone(),
        reason,
    };
    for (tds, &d) in dwell_plan {
        if d < 0 {
            return Err(dwell_err(tds, format!("negative dwell {d}")));
        }
        if d > 0 && !route.stop_points.contains(tds) {
            return Err(dwell_err(tds, "dwell outside a stop point".into()));
        }
    }
    for stop in &route.stop_points {
        let d = dwell_plan.get(stop).copied().unwrap_or(-1);
        if d < train.min_dwell {
            return Err(dwell_err(
                stop,
                format!("stop dwell {d} below minimum {}", train.min_dwell),
            ));
        }
    }

    let n = route.tds_sequence.len();
    let mut occupations = Vec::with_capacity(n);
    let mut t = entry_time;
    for (i, tds) in route.tds_sequence.iter().enumerate() {
        let dwell = dwell_plan.get(tds).copied().unwrap_or(0);
        let leave = t + route.run_times[i] + dwell;
        // The final occupation of a leg that hands its stock to a successor
        // ends exactly at the handoff: the section is never released between
        // the two legs, the successor's occupation continues it.
        let margin = if i + 1 == n && train.stock_successor.is_some() {
            0
        } else {
            network.release_margin(tds)
        };
        occupations.push(Occupation {
            tds: tds.clone(),
            start: t,
            end: leave + margin,
        });
        t = leave;
    }
    Ok(TimedPath {
        train_id: train.id.clone(),
        route_id: route_id.clone(),
        occupations,
    })
}

/// Exit time encoded in a path: the end of the last occupation minus the
/// release margin (which is absent on stock-handoff legs).
pub fn path_exit_time(world: &World, path: &TimedPath) -> Time {
    let last = match path.occupations.last() {
        Some(o) => o,
        None => return path.entry(),
    };
    let handoff = world
        .timetable
        .train(&path.train_id)
        .map_or(false, |t| t.stock_successor.is_some());
    if handoff {
        last.end
    } else {
        last.end - world.network.release_margin(&last.tds)
    }
}

/// A detected occupation conflict between two paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConflict {
    pub tds: TdsId,
    pub overlap: (Time, Time),
}

/// Returns the earliest-starting conflict between two paths: the shared TDS
/// whose occupation intervals intersect with positive measure, minimizing
/// overlap start (ties broken by TDS id).
pub fn paths_conflict(p1: &TimedPath, p2: &TimedPath) -> Option<PathConflict> {
    debug_assert_ne!(p1.train_id, p2.train_id, "paths_conflict wants two trains");
    let mut by_tds: BTreeMap<&TdsId, Vec<&Occupation>> = BTreeMap::new();
    for o in &p2.occupations {
        by_tds.entry(&o.tds).or_default().push(o);
    }
    let mut best: Option<PathConflict> = None;
    for o1 in &p1.occupations {
        let Some(others) = by_tds.get(&o1.tds) else {
            continue;
        };
        for o2 in others {
            if let Some(overlap) = o1.overlap(o2) {
                let better = match &best {
                    None => true,
                    Some(b) => (overlap.0, &o1.tds) < (b.overlap.0, &b.tds),
                };
                if better {
                    best = Some(PathConflict {
                        tds: o1.tds.clone(),
                        overlap,
                    });
                }
            }
        }
    }
    best
}

/// One reported conflict of a plan: an unordered train pair and the earliest
/// TDS where their occupations overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttpOverlap {
    pub pair: (TrainId, TrainId),
    pub tds: TdsId,
}

/// Checks a plan for occupation conflicts. Returns one entry per conflicting
/// train pair (with the earliest overlapping TDS); an empty list means the
/// plan is conflict-free.
pub fn validate_rttp(world: &World, rttp: &Rttp) -> Result<Vec<RttpOverlap>> {
    for (train_id, path) in &rttp.paths {
        let train = world
            .timetable
            .train(train_id)
            .ok_or_else(|| Error::DanglingReference(format!("RTTP covers unknown train {train_id}")))?;
        if path.train_id != *train_id {
            return Err(Error::DanglingReference(format!(
                "path keyed {train_id} carries train id {}",
                path.train_id
            )));
        }
        if train.route(&path.route_id).is_none() {
            return Err(Error::DanglingReference(format!(
                "train {train_id} has no route {}",
                path.route_id
            )));
        }
        for o in &path.occupations {
            if !world.network.contains(&o.tds) {
                return Err(Error::DanglingReference(format!(
                    "path of {train_id} references unknown TDS {}",
                    o.tds
                )));
            }
        }
    }
    let mut overlaps = Vec::new();
    let paths: Vec<&TimedPath> = rttp.paths.values().collect();
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            if let Some(c) = paths_conflict(paths[i], paths[j]) {
                overlaps.push(RttpOverlap {
                    pair: (paths[i].train_id.clone(), paths[j].train_id.clone()),
                    tds: c.tds,
                });
            }
        }
    }
    Ok(overlaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_network(margin_s1: Secs) -> Network {
        Network::new(vec![
            Tds {
                id: "s1".into(),
                successors: vec!["s2".into()],
                station_stop: false,
                release_margin: margin_s1,
            },
            Tds {
                id: "s2".into(),
                successors: vec!["s3".into()],
                station_stop: true,
                release_margin: 0,
            },
            Tds {
                id: "s3".into(),
                successors: vec![],
                station_stop: false,
                release_margin: 0,
            },
        ])
        .unwrap()
    }

    fn train_on(route: Route) -> Train {
        Train {
            id: "t1".into(),
            category: Category::Regional,
            weight: 28.5,
            scheduled_entry: 0,
            scheduled_exit: 120,
            routes: vec![route],
            stock_predecessor: None,
            stock_successor: None,
            min_dwell: 30,
        }
    }

    fn two_section_route() -> Route {
        Route {
            id: "r1".into(),
            tds_sequence: vec!["s1".into(), "s2".into()],
            run_times: vec![60, 60],
            stop_points: BTreeSet::new(),
        }
    }

    #[test]
    fn accumulates_run_times_without_margin() {
        let net = simple_network(0);
        let train = train_on(two_section_route());
        let path =
            occupation_intervals(&net, &train, &"r1".into(), 0, &BTreeMap::new()).unwrap();
        let got: Vec<(String, Time, Time)> = path
            .occupations
            .iter()
            .map(|o| (o.tds.0.clone(), o.start, o.end))
            .collect();
        assert_eq!(
            got,
            vec![("s1".into(), 0, 60), ("s2".into(), 60, 120)]
        );
    }

    #[test]
    fn release_margin_extends_occupation_past_the_move() {
        let net = simple_network(5);
        let train = train_on(two_section_route());
        let path =
            occupation_intervals(&net, &train, &"r1".into(), 0, &BTreeMap::new()).unwrap();
        let got: Vec<(String, Time, Time)> = path
            .occupations
            .iter()
            .map(|o| (o.tds.0.clone(), o.start, o.end))
            .collect();
        assert_eq!(
            got,
            vec![("s1".into(), 0, 65), ("s2".into(), 60, 120)]
        );
    }

    /// Independent oracle: occupation starts are prefix sums of
    /// `run_time + dwell`, ends are the next start plus the section margin.
    fn prefix_sum_oracle(
        net: &Network,
        route: &Route,
        entry: Time,
        dwells: &BTreeMap<TdsId, Secs>,
    ) -> Vec<(Time, Time)> {
        let mut starts = vec![entry];
        for (i, tds) in route.tds_sequence.iter().enumerate() {
            let step = route.run_times[i] + dwells.get(tds).copied().unwrap_or(0);
            starts.push(starts[i] + step);
        }
        (0..route.tds_sequence.len())
            .map(|i| {
                let margin = net.release_margin(&route.tds_sequence[i]);
                (starts[i], starts[i + 1] + margin)
            })
            .collect()
    }

    #[test]
    fn dwell_at_stop_matches_prefix_sum_oracle() {
        let net = simple_network(0);
        let route = Route {
            id: "r1".into(),
            tds_sequence: vec!["s1".into(), "s2".into(), "s3".into()],
            run_times: vec![60, 60, 60],
            stop_points: [TdsId::from("s2")].into(),
        };
        let mut train = train_on(route.clone());
        train.scheduled_exit = 310;
        let dwells: BTreeMap<TdsId, Secs> = [(TdsId::from("s2"), 30)].into();
        let path = occupation_intervals(&net, &train, &"r1".into(), 100, &dwells).unwrap();
        let got: Vec<(Time, Time)> = path.occupations.iter().map(|o| (o.start, o.end)).collect();
        assert_eq!(got, vec![(100, 160), (160, 250), (250, 310)]);
        assert_eq!(got, prefix_sum_oracle(&net, &route, 100, &dwells));
    }

    #[test]
    fn rejects_unknown_route_and_bad_dwells() {
        let net = simple_network(0);
        let train = train_on(two_section_route());
        assert!(matches!(
            occupation_intervals(&net, &train, &"nope".into(), 0, &BTreeMap::new()),
            Err(Error::InvalidRoute { .. })
        ));
        let neg: BTreeMap<TdsId, Secs> = [(TdsId::from("s1"), -5)].into();
        assert!(matches!(
            occupation_intervals(&net, &train, &"r1".into(), 0, &neg),
            Err(Error::InvalidDwell { .. })
        ));
        // Dwell on a non-stop section is also rejected.
        let off_stop: BTreeMap<TdsId, Secs> = [(TdsId::from("s1"), 30)].into();
        assert!(matches!(
            occupation_intervals(&net, &train, &"r1".into(), 0, &off_stop),
            Err(Error::InvalidDwell { .. })
        ));
    }

    #[test]
    fn stop_dwell_below_minimum_is_rejected() {
        let net = simple_network(0);
        let route = Route {
            id: "r1".into(),
            tds_sequence: vec!["s1".into(), "s2".into()],
            run_times: vec![60, 60],
            stop_points: [TdsId::from("s2")].into(),
        };
        let train = train_on(route);
        let short: BTreeMap<TdsId, Secs> = [(TdsId::from("s2"), 10)].into();
        assert!(matches!(
            occupation_intervals(&net, &train, &"r1".into(), 0, &short),
            Err(Error::InvalidDwell { .. })
        ));
    }

    fn path_with(train: &str, occs: &[(&str, Time, Time)]) -> TimedPath {
        TimedPath {
            train_id: train.into(),
            route_id: "r".into(),
            occupations: occs
                .iter()
                .map(|(t, s, e)| Occupation {
                    tds: (*t).into(),
                    start: *s,
                    end: *e,
                })
                .collect(),
        }
    }

    #[test]
    fn conflict_is_the_interval_intersection() {
        let p1 = path_with("t1", &[("x", 100, 160)]);
        let p2 = path_with("t2", &[("x", 150, 200)]);
        let c = paths_conflict(&p1, &p2).unwrap();
        assert_eq!(c.tds, "x".into());
        assert_eq!(c.overlap, (150, 160));
    }

    #[test]
    fn touching_half_open_intervals_do_not_conflict() {
        let p1 = path_with("t1", &[("x", 100, 160)]);
        let p2 = path_with("t2", &[("x", 160, 200)]);
        assert!(paths_conflict(&p1, &p2).is_none());
    }

    #[test]
    fn conflict_detection_is_symmetric_and_earliest_first() {
        let p1 = path_with("t1", &[("a", 0, 50), ("b", 50, 120)]);
        let p2 = path_with("t2", &[("b", 100, 150), ("a", 30, 60)]);
        let c12 = paths_conflict(&p1, &p2).unwrap();
        let c21 = paths_conflict(&p2, &p1).unwrap();
        // Earliest overlap start wins: on "a" at [30,50).
        assert_eq!(c12.tds, "a".into());
        assert_eq!(c12.overlap, (30, 50));
        assert_eq!(c12, c21);
    }

    fn tiny_world(trains: &[&str]) -> World {
        let network = Network::new(vec![Tds {
            id: "x".into(),
            successors: vec![],
            station_stop: false,
            release_margin: 0,
        }])
        .unwrap();
        let route = Route {
            id: "r".into(),
            tds_sequence: vec!["x".into()],
            run_times: vec![60],
            stop_points: BTreeSet::new(),
        };
        let mut tt = Timetable::default();
        for id in trains {
            tt.trains.insert(
                (*id).into(),
                Train {
                    id: (*id).into(),
                    category: Category::Freight,
                    weight: 19.5,
                    scheduled_entry: 0,
                    scheduled_exit: 60,
                    routes: vec![route.clone()],
                    stock_predecessor: None,
                    stock_successor: None,
                    min_dwell: 30,
                },
            );
        }
        World {
            network,
            timetable: tt,
        }
    }

    #[test]
    fn validate_reports_conflicting_pairs_only() {
        let world = tiny_world(&["t1", "t2", "t3"]);
        let mut rttp = Rttp::default();
        rttp.paths
            .insert("t1".into(), path_with("t1", &[("x", 100, 160)]));
        assert!(validate_rttp(&world, &rttp).unwrap().is_empty());

        rttp.paths
            .insert("t2".into(), path_with("t2", &[("x", 150, 200)]));
        rttp.paths
            .insert("t3".into(), path_with("t3", &[("x", 200, 260)]));
        let overlaps = validate_rttp(&world, &rttp).unwrap();
        assert_eq!(overlaps.len(), 1);
        assert_eq!(overlaps[0].pair, ("t1".into(), "t2".into()));
        assert_eq!(overlaps[0].tds, "x".into());
    }

    #[test]
    fn validate_rejects_dangling_references() {
        let world = tiny_world(&["t1"]);
        let mut rttp = Rttp::default();
        rttp.paths
            .insert("ghost".into(), path_with("ghost", &[("x", 0, 60)]));
        assert!(matches!(
            validate_rttp(&world, &rttp),
            Err(Error::DanglingReference(_))
        ));
        let mut rttp = Rttp::default();
        let mut p = path_with("t1", &[("x", 0, 60)]);
        p.route_id = "unknown".into();
        rttp.paths.insert("t1".into(), p);
        assert!(matches!(
            validate_rttp(&world, &rttp),
            Err(Error::DanglingReference(_))
        ));
    }

    #[test]
    fn entry_shift_moves_every_occupation_uniformly() {
        let net = simple_network(5);
        let train = train_on(two_section_route());
        let base =
            occupation_intervals(&net, &train, &"r1".into(), 0, &BTreeMap::new()).unwrap();
        let shifted =
            occupation_intervals(&net, &train, &"r1".into(), 137, &BTreeMap::new()).unwrap();
        for (a, b) in base.occupations.iter().zip(&shifted.occupations) {
            assert_eq!(a.start + 137, b.start);
            assert_eq!(a.end + 137, b.end);
        }
    }
}
