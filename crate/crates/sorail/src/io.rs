//! JSON documents for networks, scenarios, simulation logs and solver
//! instances, plus whole-world validation of loaded inputs.
//!
//! Two document kinds are authored by hand and therefore validated strictly
//! on load:
//!
//! - a **world document** (`network.json`): arrays of TDS and train records
//!   (each train embedding its admissible routes). Scheduled paths may be
//!   given explicitly; when the array is empty every train is scheduled on
//!   its first route at its scheduled entry with minimal dwells, and its
//!   scheduled exit is rewritten to match.
//! - a **scenario document** (`scenario.json`): a reference to a world
//!   document (a file path, or `builtin:<name>` for a bundled fixture), the
//!   sampling seed, and the per-train entrance delays. By default the
//!   referenced timetable is prepared on load — compressed to its
//!   conflict-free reference and partitioned at stops — so the delay keys
//!   refer to the resulting legs.
//!
//! Simulation logs and solver sub-instances round-trip through plain serde
//! with no interpretation beyond [`SubInstance::validate`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infra::{
    occupation_intervals, path_exit_time, Network, Rttp, Secs, Tds, TimedPath, Timetable, Train,
    TrainId, World,
};
use crate::scenario::{assert_conflict_free, compress_timetable, partition_trains, Scenario};
use crate::sim::SimulationLog;
use crate::solver::SubInstance;

/// Smallest admissible minimum dwell (technical minimum stop time).
pub const MIN_DWELL_FLOOR: Secs = 30;

/// Scheme prefix that resolves a world reference against the bundled
/// fixtures instead of the filesystem.
pub const BUILTIN_SCHEME: &str = "builtin:";

// ---------------------------------------------------------------------------
// World documents
// ---------------------------------------------------------------------------

/// On-disk form of a [`World`]: flat arrays instead of keyed maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDoc {
    pub tds: Vec<Tds>,
    pub trains: Vec<Train>,
    /// One path per train. Leave empty to have every train scheduled on its
    /// first route at its scheduled entry (exits are then rewritten).
    #[serde(default)]
    pub scheduled_paths: Vec<TimedPath>,
}

impl WorldDoc {
    pub fn from_world(world: &World) -> Self {
        WorldDoc {
            tds: world.network.sections().cloned().collect(),
            trains: world.timetable.trains.values().cloned().collect(),
            scheduled_paths: world.timetable.scheduled_paths.values().cloned().collect(),
        }
    }

    /// Assembles and validates the world this document describes.
    pub fn into_world(self) -> Result<World> {
        let network = Network::new(self.tds)?;
        let mut trains: BTreeMap<TrainId, Train> = BTreeMap::new();
        for t in self.trains {
            if trains.insert(t.id.clone(), t.clone()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate train {}", t.id)));
            }
        }

        let world = if self.scheduled_paths.is_empty() {
            schedule_all(network, trains)?
        } else {
            let mut paths: BTreeMap<TrainId, TimedPath> = BTreeMap::new();
            for p in self.scheduled_paths {
                if !trains.contains_key(&p.train_id) {
                    return Err(Error::DanglingReference(format!(
                        "scheduled path for unknown train {}",
                        p.train_id
                    )));
                }
                if paths.insert(p.train_id.clone(), p.clone()).is_some() {
                    return Err(Error::InvalidInput(format!(
                        "duplicate scheduled path for train {}",
                        p.train_id
                    )));
                }
            }
            for id in trains.keys() {
                if !paths.contains_key(id) {
                    return Err(Error::InvalidInput(format!(
                        "train {id} has no scheduled path (give all paths or none)"
                    )));
                }
            }
            World {
                network,
                timetable: Timetable {
                    trains,
                    scheduled_paths: paths,
                },
            }
        };
        validate_world(&world)?;
        Ok(world)
    }
}

/// Schedules every train on its first route at its scheduled entry with
/// minimal dwells and rewrites its scheduled exit from the built path.
fn schedule_all(network: Network, trains: BTreeMap<TrainId, Train>) -> Result<World> {
    let mut paths = BTreeMap::new();
    for t in trains.values() {
        if t.routes.is_empty() {
            return Err(Error::NoRoute(t.id.clone()));
        }
        for r in &t.routes {
            network.validate_route(&t.id, r)?;
        }
        let route_id = t.routes[0].id.clone();
        let dwell_plan = t.routes[0].min_dwell_plan(t.min_dwell);
        let path = occupation_intervals(&network, t, &route_id, t.scheduled_entry, &dwell_plan)?;
        paths.insert(t.id.clone(), path);
    }
    let mut world = World {
        network,
        timetable: Timetable {
            trains,
            scheduled_paths: paths,
        },
    };
    let ids: Vec<TrainId> = world.timetable.trains.keys().cloned().collect();
    for id in ids {
        let exit = path_exit_time(&world, &world.timetable.scheduled_paths[&id]);
        world.timetable.trains.get_mut(&id).unwrap().scheduled_exit = exit;
    }
    Ok(world)
}

/// Checks every invariant a world must satisfy before it is simulated:
/// train records (weights within their category interval, dwell floor,
/// well-formed routes sharing endpoints, mutually consistent stock links),
/// scheduled paths (on an admissible route, physically consistent with run
/// times, dwells and release margins, matching the declared entry and
/// exit), and a conflict-free schedule overall.
pub fn validate_world(world: &World) -> Result<()> {
    let tt = &world.timetable;
    for (id, t) in &tt.trains {
        if &t.id != id {
            return Err(Error::InvalidInput(format!(
                "train keyed {id} carries id {}",
                t.id
            )));
        }
        let (lo, hi) = t.category.weight_interval();
        if !(t.weight >= lo && t.weight <= hi) {
            return Err(Error::InvalidInput(format!(
                "train {id}: weight {} outside {} interval [{lo}, {hi}]",
                t.weight, t.category
            )));
        }
        if t.min_dwell < MIN_DWELL_FLOOR {
            return Err(Error::InvalidInput(format!(
                "train {id}: min_dwell {} below floor {MIN_DWELL_FLOOR}",
                t.min_dwell
            )));
        }
        if t.routes.is_empty() {
            return Err(Error::NoRoute(id.clone()));
        }
        for r in &t.routes {
            world.network.validate_route(id, r)?;
        }
        let first = &t.routes[0];
        for r in &t.routes[1..] {
            if r.origin() != first.origin() || r.destination() != first.destination() {
                return Err(Error::InvalidRoute {
                    train: id.clone(),
                    route: r.id.clone(),
                    reason: format!(
                        "endpoints differ from route {} (all routes of a train must share origin and destination)",
                        first.id
                    ),
                });
            }
        }
        check_stock_links(tt, t)?;
        let path = tt.scheduled_paths.get(id).ok_or_else(|| {
            Error::InvalidInput(format!("train {id} has no scheduled path"))
        })?;
        check_scheduled_path(world, t, path)?;
    }
    for id in tt.scheduled_paths.keys() {
        if !tt.trains.contains_key(id) {
            return Err(Error::DanglingReference(format!(
                "scheduled path for unknown train {id}"
            )));
        }
    }
    assert_conflict_free(tt)
}

fn check_stock_links(tt: &Timetable, t: &Train) -> Result<()> {
    if let Some(succ_id) = &t.stock_successor {
        let succ = tt.trains.get(succ_id).ok_or_else(|| {
            Error::DanglingReference(format!("train {}: stock successor {succ_id}", t.id))
        })?;
        if succ.stock_predecessor.as_ref() != Some(&t.id) {
            return Err(Error::InvalidInput(format!(
                "stock link {} -> {succ_id} is not mirrored by the successor",
                t.id
            )));
        }
        if succ.routes.first().map(|r| r.origin())
            != t.routes.first().map(|r| r.destination())
        {
            return Err(Error::InvalidInput(format!(
                "stock link {} -> {succ_id}: successor does not depart from the arrival TDS",
                t.id
            )));
        }
    }
    if let Some(pred_id) = &t.stock_predecessor {
        let pred = tt.trains.get(pred_id).ok_or_else(|| {
            Error::DanglingReference(format!("train {}: stock predecessor {pred_id}", t.id))
        })?;
        if pred.stock_successor.as_ref() != Some(&t.id) {
            return Err(Error::InvalidInput(format!(
                "stock link {pred_id} -> {} is not mirrored by the predecessor",
                t.id
            )));
        }
    }
    Ok(())
}

/// A scheduled path must traverse one of the train's routes in order, obey
/// run times, dwells and release margins, and agree with the train record's
/// entry and exit timestamps. Waiting beyond the minimum is allowed (raw
/// timetables carry slack; compression removes it), teleporting is not.
fn check_scheduled_path(world: &World, t: &Train, path: &TimedPath) -> Result<()> {
    let id = &t.id;
    if path.train_id != *id {
        return Err(Error::InvalidInput(format!(
            "scheduled path of {id} names train {}",
            path.train_id
        )));
    }
    let route = t.route(&path.route_id).ok_or_else(|| Error::InvalidRoute {
        train: id.clone(),
        route: path.route_id.clone(),
        reason: "scheduled path uses a route the train does not have".into(),
    })?;
    let seq: Vec<_> = path.occupations.iter().map(|o| o.tds.clone()).collect();
    if seq != route.tds_sequence {
        return Err(Error::InvalidInput(format!(
            "scheduled path of {id} does not follow route {}",
            route.id
        )));
    }
    for (i, o) in path.occupations.iter().enumerate() {
        if o.end <= o.start {
            return Err(Error::InvalidInput(format!(
                "scheduled path of {id}: empty occupation of {}",
                o.tds
            )));
        }
        if let Some(next) = path.occupations.get(i + 1) {
            let min_hold = route.run_times[i]
                + if route.stop_points.contains(&o.tds) {
                    t.min_dwell
                } else {
                    0
                };
            if next.start < o.start + min_hold {
                return Err(Error::InvalidInput(format!(
                    "scheduled path of {id}: leaves {} after {} s (minimum {min_hold})",
                    o.tds,
                    next.start - o.start
                )));
            }
            let margin = world.network.release_margin(&o.tds);
            if o.end < next.start + margin {
                return Err(Error::InvalidInput(format!(
                    "scheduled path of {id}: {} released before its {margin} s margin",
                    o.tds
                )));
            }
            if next.start > o.end {
                return Err(Error::InvalidInput(format!(
                    "scheduled path of {id}: gap between {} and {}",
                    o.tds, next.tds
                )));
            }
        }
    }
    if path.entry() != t.scheduled_entry {
        return Err(Error::InvalidInput(format!(
            "train {id}: scheduled_entry {} but path enters at {}",
            t.scheduled_entry,
            path.entry()
        )));
    }
    let exit = path_exit_time(world, path);
    if exit != t.scheduled_exit {
        return Err(Error::InvalidInput(format!(
            "train {id}: scheduled_exit {} but path clears the area at {exit}",
            t.scheduled_exit
        )));
    }
    Ok(())
}

pub fn load_world(path: impl AsRef<Path>) -> Result<World> {
    let doc: WorldDoc = read_json(path.as_ref())?;
    doc.into_world()
}

pub fn save_world(world: &World, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &WorldDoc::from_world(world))
}

// ---------------------------------------------------------------------------
// Scenario documents
// ---------------------------------------------------------------------------

/// On-disk form of a [`Scenario`]: the world is referenced, not embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    /// World reference: a path to a world document (relative paths resolve
    /// against the scenario file's directory) or `builtin:<name>`.
    pub network: String,
    /// Compress and partition the referenced timetable on load. Generated
    /// scenarios set this: their delays are keyed by the prepared legs.
    #[serde(default = "default_true")]
    pub prepare: bool,
    pub seed: u64,
    pub entrance_delays: BTreeMap<TrainId, Secs>,
}

fn default_true() -> bool {
    true
}

/// Resolves a world reference: `builtin:<name>` against the bundled
/// fixtures, anything else as a world-document path (relative to `base`).
pub fn resolve_world(reference: &str, base: Option<&Path>) -> Result<World> {
    if let Some(name) = reference.strip_prefix(BUILTIN_SCHEME) {
        return crate::fixtures::builtin_world(name).ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown builtin world {name:?} (available: {})",
                crate::fixtures::BUILTIN_WORLDS.join(", ")
            ))
        });
    }
    let mut file = PathBuf::from(reference);
    if file.is_relative() {
        if let Some(base) = base {
            file = base.join(file);
        }
    }
    load_world(file)
}

/// Compresses and partitions a raw world into the experiment timetable.
pub fn prepare_world(world: World) -> Result<World> {
    let compressed = compress_timetable(&world.network, &world.timetable)?;
    let partitioned = partition_trains(&world.network, &compressed)?;
    Ok(World {
        network: world.network,
        timetable: partitioned,
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let doc: ScenarioDoc = read_json(path)?;
    scenario_from_doc(doc, path.parent())
}

/// Resolves a scenario document against its world reference. The delay map
/// must cover exactly the trains of the (prepared) timetable.
pub fn scenario_from_doc(doc: ScenarioDoc, base: Option<&Path>) -> Result<Scenario> {
    let mut world = resolve_world(&doc.network, base)?;
    if doc.prepare {
        world = prepare_world(world)?;
    }
    for id in doc.entrance_delays.keys() {
        if !world.timetable.trains.contains_key(id) {
            return Err(Error::DanglingReference(format!(
                "entrance delay for unknown train {id}"
            )));
        }
    }
    for id in world.timetable.trains.keys() {
        if !doc.entrance_delays.contains_key(id) {
            return Err(Error::InvalidInput(format!(
                "no entrance delay for train {id}"
            )));
        }
    }
    Ok(Scenario {
        world,
        entrance_delays: doc.entrance_delays,
        seed: doc.seed,
    })
}

pub fn save_scenario(doc: &ScenarioDoc, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), doc)
}

// ---------------------------------------------------------------------------
// Logs, instances, plans
// ---------------------------------------------------------------------------

pub fn load_log(path: impl AsRef<Path>) -> Result<SimulationLog> {
    read_json(path.as_ref())
}

pub fn save_log(log: &SimulationLog, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), log)
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<SubInstance> {
    let inst: SubInstance = read_json(path.as_ref())?;
    inst.validate()?;
    Ok(inst)
}

pub fn save_instance(inst: &SubInstance, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), inst)
}

pub fn load_rttp(path: impl AsRef<Path>) -> Result<Rttp> {
    read_json(path.as_ref())
}

pub fn save_rttp(rttp: &Rttp, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), rttp)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn worlds_round_trip_through_their_document_form() {
        let dir = tmp();
        for world in [fixtures::toy_corridor(), fixtures::demo_line()] {
            let file = dir.path().join("network.json");
            save_world(&world, &file).unwrap();
            let back = load_world(&file).unwrap();
            assert_eq!(world, back);
        }
    }

    #[test]
    fn a_document_without_paths_gets_scheduled_and_its_exits_rewritten() {
        let reference = fixtures::demo_line();
        let mut doc = WorldDoc::from_world(&reference);
        doc.scheduled_paths.clear();
        for t in &mut doc.trains {
            t.scheduled_exit = 0;
        }
        let world = doc.into_world().unwrap();
        assert_eq!(world, reference);
    }

    #[test]
    fn invalid_worlds_are_rejected_with_the_offending_train_named() {
        let base = fixtures::demo_line();

        let mut w = base.clone();
        w.timetable.trains.get_mut(&TrainId::new("r1")).unwrap().weight = 99.0;
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("r1") && err.contains("weight"), "{err}");

        let mut w = base.clone();
        w.timetable.trains.get_mut(&TrainId::new("r2")).unwrap().min_dwell = 10;
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("min_dwell"), "{err}");

        let mut w = base.clone();
        w.timetable
            .trains
            .get_mut(&TrainId::new("r3"))
            .unwrap()
            .stock_successor = Some(TrainId::new("ghost"));
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");

        // A one-sided stock link is inconsistent even when both trains exist.
        let mut w = base.clone();
        w.timetable
            .trains
            .get_mut(&TrainId::new("r1"))
            .unwrap()
            .stock_successor = Some(TrainId::new("r2"));
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("not mirrored"), "{err}");

        let mut w = base.clone();
        w.timetable
            .scheduled_paths
            .get_mut(&TrainId::new("r1"))
            .unwrap()
            .occupations[0]
            .start += 1;
        assert!(validate_world(&w).is_err());
    }

    #[test]
    fn paths_that_outrun_their_route_or_teleport_are_rejected() {
        let base = fixtures::demo_line();
        let id = TrainId::new("r1");

        let mut w = base.clone();
        {
            let p = w.timetable.scheduled_paths.get_mut(&id).unwrap();
            // Enter the second TDS before the first run time has elapsed.
            p.occupations[1].start -= 30;
            p.occupations[0].end -= 30;
        }
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("minimum"), "{err}");

        let mut w = base.clone();
        {
            let p = w.timetable.scheduled_paths.get_mut(&id).unwrap();
            // Release the first TDS before its margin after the handover.
            p.occupations[0].end = p.occupations[1].start;
        }
        let err = validate_world(&w).unwrap_err().to_string();
        assert!(err.contains("margin"), "{err}");
    }

    #[test]
    fn scenario_documents_resolve_builtins_and_reproduce_the_generator() {
        let dir = tmp();
        let reference = fixtures::corridor_scenario(5).unwrap();
        let doc = ScenarioDoc {
            network: "builtin:corridor".into(),
            prepare: true,
            seed: 5,
            entrance_delays: reference.entrance_delays.clone(),
        };
        let file = dir.path().join("scenario.json");
        save_scenario(&doc, &file).unwrap();
        let loaded = load_scenario(&file).unwrap();
        assert_eq!(loaded.world, reference.world);
        assert_eq!(loaded.entrance_delays, reference.entrance_delays);
        assert_eq!(loaded.seed, reference.seed);
    }

    #[test]
    fn scenario_documents_may_reference_world_files_relative_to_themselves() {
        let dir = tmp();
        let world = fixtures::demo_line();
        save_world(&world, dir.path().join("net.json")).unwrap();
        let delays: BTreeMap<TrainId, Secs> = world
            .timetable
            .trains
            .keys()
            .map(|id| (id.clone(), 60))
            .collect();
        let doc = ScenarioDoc {
            network: "net.json".into(),
            prepare: false,
            seed: 1,
            entrance_delays: delays.clone(),
        };
        let file = dir.path().join("scenario.json");
        save_scenario(&doc, &file).unwrap();
        let loaded = load_scenario(&file).unwrap();
        assert_eq!(loaded.world, world);
        assert_eq!(loaded.entrance_delays, delays);
    }

    #[test]
    fn delay_maps_must_cover_the_prepared_timetable_exactly() {
        let reference = fixtures::corridor_scenario(2).unwrap();

        let mut short = reference.entrance_delays.clone();
        let removed = short.keys().next().cloned().unwrap();
        short.remove(&removed);
        let doc = ScenarioDoc {
            network: "builtin:corridor".into(),
            prepare: true,
            seed: 2,
            entrance_delays: short,
        };
        let err = scenario_from_doc(doc, None).unwrap_err().to_string();
        assert!(err.contains("no entrance delay"), "{err}");

        let mut extra = reference.entrance_delays.clone();
        extra.insert(TrainId::new("phantom"), 5);
        let doc = ScenarioDoc {
            network: "builtin:corridor".into(),
            prepare: true,
            seed: 2,
            entrance_delays: extra,
        };
        let err = scenario_from_doc(doc, None).unwrap_err().to_string();
        assert!(err.contains("phantom"), "{err}");

        let doc = ScenarioDoc {
            network: "builtin:atlantis".into(),
            prepare: true,
            seed: 2,
            entrance_delays: BTreeMap::new(),
        };
        let err = scenario_from_doc(doc, None).unwrap_err().to_string();
        assert!(err.contains("atlantis"), "{err}");
    }

    #[test]
    fn logs_and_sub_instances_round_trip() {
        use crate::solver::{instance_from_plan, Objective};

        let dir = tmp();
        let scenario = fixtures::corridor_scenario(9).unwrap();
        let mut tms = crate::baselines::FcfsTms;
        let log = crate::sim::run_closed_loop(&scenario, &mut tms, 300, 2400).unwrap();
        let file = dir.path().join("log.json");
        save_log(&log, &file).unwrap();
        assert_eq!(load_log(&file).unwrap(), log);

        let state = crate::sim::SimState::new(&scenario).unwrap();
        let ts = state.emit_traffic_state(2400);
        let inst =
            instance_from_plan(&scenario.world, &ts, state.rttp(), Objective::WeightedDelay)
                .unwrap();
        let file = dir.path().join("inst.json");
        save_instance(&inst, &file).unwrap();
        assert_eq!(load_instance(&file).unwrap(), inst);
    }
}
