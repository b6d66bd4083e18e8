//! Reusable example worlds: small builders for tests plus the built-in
//! networks the CLI exposes under `builtin:` names.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::infra::{
    occupation_intervals, path_exit_time, Category, Network, Route, RouteId, Secs, Tds, TdsId,
    Time, Timetable, Train, TrainId, World,
};

/// Section builder.
pub fn tds(id: &str, successors: &[&str], station_stop: bool, release_margin: Secs) -> Tds {
    Tds {
        id: id.into(),
        successors: successors.iter().map(|s| TdsId::new(*s)).collect(),
        station_stop,
        release_margin,
    }
}

/// Route builder; `runs` is parallel to `seq`.
pub fn route(id: &str, seq: &[&str], runs: &[Secs], stops: &[&str]) -> Route {
    assert_eq!(seq.len(), runs.len(), "run_times must parallel tds_sequence");
    Route {
        id: id.into(),
        tds_sequence: seq.iter().map(|s| TdsId::new(*s)).collect(),
        run_times: runs.to_vec(),
        stop_points: stops.iter().map(|s| TdsId::new(*s)).collect(),
    }
}

/// Train builder. The scheduled exit is a placeholder until [`world_from`]
/// rewrites it from the scheduled path.
pub fn train(
    id: &str,
    category: Category,
    weight: f64,
    scheduled_entry: Time,
    routes: Vec<Route>,
    min_dwell: Secs,
) -> Train {
    Train {
        id: id.into(),
        category,
        weight,
        scheduled_entry,
        scheduled_exit: scheduled_entry,
        routes,
        stock_predecessor: None,
        stock_successor: None,
        min_dwell,
    }
}

/// Assembles a world: every train is scheduled on its first route at its
/// scheduled entry with minimum dwells, and its scheduled exit is rewritten
/// to match the resulting path.
pub fn world_from(network: Network, trains: Vec<Train>) -> Result<World> {
    let mut records: BTreeMap<TrainId, Train> = BTreeMap::new();
    let mut paths = BTreeMap::new();
    for mut t in trains {
        for r in &t.routes {
            network.validate_route(&t.id, r)?;
        }
        let route_id: RouteId = t.routes[0].id.clone();
        let dwell_plan = t.routes[0].min_dwell_plan(t.min_dwell);
        let path = occupation_intervals(&network, &t, &route_id, t.scheduled_entry, &dwell_plan)?;
        paths.insert(t.id.clone(), path);
        records.insert(t.id.clone(), t.clone());
        // Exit rewrite needs the world's margin view; do it after the loop.
        let _ = &mut t;
    }
    let mut world = World {
        network,
        timetable: Timetable {
            trains: records,
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

/// A plain line `a1 → a2 → … → an`, no stations, uniform run and margin.
pub fn line_network(sections: &[&str], margin: Secs) -> Network {
    let mut v = Vec::new();
    for (i, s) in sections.iter().enumerate() {
        let succ: Vec<&str> = if i + 1 < sections.len() {
            vec![sections[i + 1]]
        } else {
            vec![]
        };
        v.push(tds(s, &succ, false, margin));
    }
    Network::new(v).expect("line networks are well-formed")
}

// ---------------------------------------------------------------------------
// Built-in worlds
// ---------------------------------------------------------------------------

/// Names the CLI accepts as `builtin:<name>`.
pub const BUILTIN_WORLDS: [&str; 2] = ["corridor", "line"];

/// Looks a built-in world up by its short name.
pub fn builtin_world(name: &str) -> Option<World> {
    match name {
        "corridor" => Some(toy_corridor()),
        "line" => Some(demo_line()),
        _ => None,
    }
}

/// Tiny three-section demo line with three regional trains.
pub fn demo_line() -> World {
    let network = line_network(&["l1", "l2", "l3"], 10);
    let mk = |id: &str, weight, entry: Time| {
        train(
            id,
            Category::Regional,
            weight,
            entry,
            vec![route(&format!("r_{id}"), &["l1", "l2", "l3"], &[90, 90, 90], &[])],
            60,
        )
    };
    world_from(network, vec![mk("r1", 25.0, 0), mk("r2", 27.0, 300), mk("r3", 23.0, 600)])
        .expect("demo line is well-formed")
}

/// Scaled stand-in for a double-track corridor between two terminals: each
/// direction runs entry → approach → station (two platform tracks, giving
/// every train a rerouting option) → outrun → exit. Twelve base trains —
/// six per direction, mixing categories and weights — half of them with a
/// scheduled station stop, entering 600 s apart.
pub fn toy_corridor() -> World {
    let margin = 15;
    let dir = |entry: &str, a: &str, p1: &str, p2: &str, b: &str, exit: &str| {
        vec![
            tds(entry, &[a], false, margin),
            tds(a, &[p1, p2], false, margin),
            tds(p1, &[b], true, margin),
            tds(p2, &[b], true, margin),
            tds(b, &[exit], false, margin),
            tds(exit, &[], false, margin),
        ]
    };
    let mut sections = dir("segrate", "e1", "st_e_p1", "st_e_p2", "e2", "e_exit");
    sections.extend(dir("ospitaletto", "w1", "st_w_p1", "st_w_p2", "w2", "w_exit"));
    let network = Network::new(sections).expect("corridor is well-formed");

    struct Spec {
        id: &'static str,
        category: Category,
        weight: f64,
        entry: Time,
        east: bool,
        stop: bool,
    }
    let spec = |id, category, weight, entry, east, stop| Spec {
        id,
        category,
        weight,
        entry,
        east,
        stop,
    };
    let plan = [
        spec("ic_e1", Category::Intercity, 24.0, 0, true, true),
        spec("r_w1", Category::Regional, 27.0, 300, false, true),
        spec("r_e1", Category::Regional, 28.0, 600, true, true),
        spec("ic_w1", Category::Intercity, 22.0, 900, false, true),
        spec("f_e1", Category::Freight, 19.0, 1200, true, false),
        spec("f_w1", Category::Freight, 21.0, 1500, false, false),
        spec("hs_e1", Category::Highspeed, 30.0, 1800, true, false),
        spec("r_w2", Category::Regional, 30.0, 2100, false, true),
        spec("r_e2", Category::Regional, 29.0, 2400, true, true),
        spec("hs_w1", Category::Highspeed, 34.0, 2700, false, false),
        spec("f_e2", Category::Freight, 18.0, 3000, true, false),
        spec("f_w2", Category::Freight, 20.0, 3300, false, false),
    ];
    let trains = plan
        .iter()
        .map(|s| {
            let (entry, a, p1, p2, b, exit) = if s.east {
                ("segrate", "e1", "st_e_p1", "st_e_p2", "e2", "e_exit")
            } else {
                ("ospitaletto", "w1", "st_w_p1", "st_w_p2", "w2", "w_exit")
            };
            let mk_route = |suffix: &str, platform: &str| {
                let stops: Vec<&str> = if s.stop { vec![platform] } else { vec![] };
                route(
                    &format!("{}_{suffix}", s.id),
                    &[entry, a, platform, b, exit],
                    &[120, 120, 120, 120, 120],
                    &stops,
                )
            };
            train(
                s.id,
                s.category,
                s.weight,
                s.entry,
                vec![mk_route("p1", p1), mk_route("p2", p2)],
                60,
            )
        })
        .collect();
    world_from(network, trains).expect("corridor timetable is conflict-free")
}

/// The full experiment input for one seed: the corridor timetable
/// compressed to its dense reference, trains partitioned at their stops
/// into stock-linked legs, and entrance delays sampled from the reference
/// perturbation model.
pub fn corridor_scenario(seed: u64) -> Result<crate::scenario::Scenario> {
    prepared_scenario(toy_corridor(), seed)
}

/// Applies the experiment pipeline — compress, partition, sample — to an
/// arbitrary world.
pub fn prepared_scenario(world: World, seed: u64) -> Result<crate::scenario::Scenario> {
    let compressed = crate::scenario::compress_timetable(&world.network, &world.timetable)?;
    let partitioned = crate::scenario::partition_trains(&world.network, &compressed)?;
    let world = World {
        network: world.network,
        timetable: partitioned,
    };
    crate::scenario::sample_perturbation(
        world,
        &crate::scenario::PerturbationModel::reference(),
        seed,
    )
}
