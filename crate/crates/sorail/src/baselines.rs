//! Reference dispatchers: a centralized optimizer over the whole scoped
//! traffic (CEN) and a first-come-first-served priority rule (FCFS). Both
//! degrade gracefully — when their search yields nothing installable they
//! re-install the projection of the current plan.

use crate::error::Result;
use crate::infra::{Rttp, World};
use crate::sim::{Tms, TmsDiagnostics, TrafficState};
use crate::solver::{
    compile_route, greedy_first_arriver, instance_from_plan, reproject, solve, Budget, Objective,
    SolveCfg, SolveStatus,
};

/// Centralized dispatcher: one exact search over every scoped train with
/// routes and orders free, minimizing unweighted total delay; trains beyond
/// the scope keep their projected paths.
pub struct CenTms {
    pub budget: Budget,
}

impl CenTms {
    pub fn new(budget: Budget) -> Self {
        CenTms { budget }
    }
}

impl Tms for CenTms {
    fn name(&self) -> &str {
        "cen"
    }

    fn plan(
        &mut self,
        ts: &TrafficState,
        current: &Rttp,
        world: &World,
    ) -> Result<(Rttp, TmsDiagnostics)> {
        let projected = reproject(world, ts, current)?;
        let mut diag = TmsDiagnostics::default();
        if ts.trains.is_empty() || projected.paths.is_empty() {
            diag.note = "empty scope".into();
            return Ok((projected, diag));
        }
        // One instance over the whole plan: scoped trains are freed to pick
        // routes and orders; trains beyond the scope ride along at their
        // planned routes but stay re-timable, so the search can place real
        // traffic ahead of a slot whose train has yet to appear instead of
        // being vetoed by it.
        let mut inst = instance_from_plan(world, ts, &projected, Objective::UnweightedDelay)?;
        for t in &mut inst.trains {
            let Some(view) = ts.trains.get(&t.id) else {
                continue;
            };
            t.free = true;
            let train = world.train(&t.id)?;
            let start_idx = view.realized.len().saturating_sub(1);
            let mut rest: Vec<_> = view
                .route_options
                .iter()
                .filter(|r| **r != t.options[0].route_id)
                .collect();
            rest.sort();
            for rid in rest {
                let route = train.route(rid).ok_or_else(|| {
                    crate::error::Error::DanglingReference(format!(
                        "train {} has no route {rid}",
                        t.id
                    ))
                })?;
                let compiled = compile_route(world, train, route, start_idx);
                if !t
                    .options
                    .iter()
                    .any(|o| o.tds == compiled.tds && o.proc == compiled.proc)
                {
                    t.options.push(compiled);
                }
            }
        }
        let cfg = SolveCfg {
            slack_pct: 0.0,
            pool_cap: 1,
            budget: self.budget,
        };
        let result = solve(&inst, &cfg)?;
        diag.gauges.insert("nodes".into(), result.nodes as f64);
        diag.gauges.insert("gap".into(), result.gap);
        diag.gauges
            .insert("lower_bound".into(), result.lower_bound);
        let Some(best) = result.best() else {
            diag.note = format!("no solution (status {:?}); keeping projection", result.status);
            return Ok((projected, diag));
        };
        diag.gauges.insert("value".into(), best.value);
        if result.status == SolveStatus::TimeLimit {
            diag.note = "budget exhausted; best incumbent installed".into();
        }
        Ok((
            Rttp {
                paths: best.plan.clone(),
                horizon_start: ts.now,
            },
            diag,
        ))
    }
}

/// First-come-first-served dispatcher: routes stay as planned; at every
/// contended section the train arriving earliest (under current delays)
/// passes first, conflicts resolved greedily in event order, ties by train
/// id.
pub struct FcfsTms;

impl Tms for FcfsTms {
    fn name(&self) -> &str {
        "fcfs"
    }

    fn plan(
        &mut self,
        ts: &TrafficState,
        current: &Rttp,
        world: &World,
    ) -> Result<(Rttp, TmsDiagnostics)> {
        let projected = reproject(world, ts, current)?;
        let mut diag = TmsDiagnostics::default();
        if projected.paths.is_empty() {
            return Ok((projected, diag));
        }
        let inst = instance_from_plan(world, ts, &projected, Objective::UnweightedDelay)?;
        let (plan, value) = greedy_first_arriver(&inst)?;
        diag.gauges.insert("value".into(), value);
        Ok((
            Rttp {
                paths: plan,
                horizon_start: ts.now,
            },
            diag,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{line_network, route, train, world_from};
    use crate::infra::{path_exit_time, validate_rttp, Category, Network, Secs, Time, TrainId};
    use crate::scenario::Scenario;
    use crate::sim::SimState;
    use std::collections::BTreeMap;

    fn state_with(world: &World, delays: &[(&str, Secs)]) -> SimState {
        SimState::new(&Scenario {
            world: world.clone(),
            entrance_delays: delays
                .iter()
                .map(|(id, d)| (TrainId::new(*id), *d))
                .collect(),
            seed: 0,
        })
        .unwrap()
    }

    fn line_world(entries: &[(&str, Time)]) -> World {
        let network = line_network(&["s1", "s2", "s3"], 0);
        let trains = entries
            .iter()
            .map(|(id, e)| {
                train(
                    id,
                    Category::Regional,
                    25.0,
                    *e,
                    vec![route(
                        &format!("r_{id}"),
                        &["s1", "s2", "s3"],
                        &[60, 60, 60],
                        &[],
                    )],
                    30,
                )
            })
            .collect();
        world_from(network, trains).unwrap()
    }

    #[test]
    fn fcfs_lets_the_punctual_train_pass_first() {
        // a is scheduled ahead of b but shows up 200 s late; b now reaches
        // the line first and keeps its slot, a queues behind.
        let world = line_world(&[("a", 0), ("b", 180)]);
        let state = state_with(&world, &[("a", 200)]);
        let ts = state.emit_traffic_state(2400);
        let mut tms = FcfsTms;
        let (plan, _) = tms.plan(&ts, state.rttp(), &world).unwrap();
        assert!(validate_rttp(&world, &plan).unwrap().is_empty());
        let a = &plan.paths[&TrainId::new("a")];
        let b = &plan.paths[&TrainId::new("b")];
        assert_eq!(b.occupations[0].start, 180);
        // a arrives at 200 but s1 is held by b until 240.
        assert_eq!(a.occupations[0].start, 240);
        // Routes untouched.
        assert_eq!(a.route_id, "r_a".into());
        assert_eq!(b.route_id, "r_b".into());
    }

    #[test]
    fn fcfs_on_an_unperturbed_schedule_reinstates_the_projection() {
        let world = line_world(&[("a", 0), ("b", 180)]);
        let state = state_with(&world, &[]);
        let ts = state.emit_traffic_state(2400);
        let mut tms = FcfsTms;
        let (plan, _) = tms.plan(&ts, state.rttp(), &world).unwrap();
        assert_eq!(plan.paths, state.rttp().paths);
    }

    #[test]
    fn cen_matches_exhaustive_enumeration_on_a_three_train_merge() {
        // Three single-route trains over one line, delays making them
        // contend; CEN's value must equal brute force over the 6 orders of
        // the first section (orders downstream follow by construction).
        let world = line_world(&[("a", 0), ("b", 180), ("c", 360)]);
        let delays: &[(&str, Secs)] = &[("a", 400), ("b", 150)];
        let state = state_with(&world, delays);
        let ts = state.emit_traffic_state(2400);
        let mut tms = CenTms::new(Budget::default());
        let (plan, diag) = tms.plan(&ts, state.rttp(), &world).unwrap();
        assert!(validate_rttp(&world, &plan).unwrap().is_empty());

        // Oracle: sequential single-line processing for each entry order.
        let entries: BTreeMap<&str, Time> = [("a", 400), ("b", 330), ("c", 360)].into();
        let sched_exit: BTreeMap<&str, Time> = [("a", 180), ("b", 360), ("c", 540)].into();
        let mut best = i64::MAX;
        let perms = [
            ["a", "b", "c"],
            ["a", "c", "b"],
            ["b", "a", "c"],
            ["b", "c", "a"],
            ["c", "a", "b"],
            ["c", "b", "a"],
        ];
        for p in perms {
            // Trains traverse 3 sections of 60 s; a follower can enter s1
            // 60 s after its leader did (block spacing), so line headway is
            // 60 s between consecutive trains at every section.
            let mut prev_entry = i64::MIN;
            let mut total = 0;
            for id in p {
                let entry = entries[id].max(prev_entry + 60);
                prev_entry = entry;
                total += (entry + 180 - sched_exit[id]).max(0);
            }
            best = best.min(total);
        }
        let total: i64 = plan
            .paths
            .values()
            .map(|path| {
                let t = world.train(&path.train_id).unwrap();
                (path_exit_time(&world, path) - t.scheduled_exit).max(0)
            })
            .sum();
        assert_eq!(total, best);
        assert_eq!(diag.gauges["value"], best as f64);
        assert_eq!(diag.gauges["gap"], 0.0);
    }

    #[test]
    fn cen_with_zero_budget_keeps_the_projected_plan() {
        let world = line_world(&[("a", 0), ("b", 180)]);
        let state = state_with(&world, &[("a", 200)]);
        let ts = state.emit_traffic_state(2400);
        let mut tms = CenTms::new(Budget { nodes: 0 });
        let (plan, diag) = tms.plan(&ts, state.rttp(), &world).unwrap();
        let projected = reproject(&world, &ts, state.rttp()).unwrap();
        assert_eq!(plan.paths, projected.paths);
        assert!(diag.note.contains("no solution"));
    }

    #[test]
    fn cen_beats_or_ties_fcfs_when_it_solves_to_optimality() {
        let network = Network::new(vec![
            crate::fixtures::tds("in_a", &["shared"], false, 0),
            crate::fixtures::tds("in_b", &["shared"], false, 0),
            crate::fixtures::tds("shared", &[], false, 0),
        ])
        .unwrap();
        let mk = |id: &str, entry_tds: &str, entry: Time, run: Secs| {
            train(
                id,
                Category::Regional,
                25.0,
                entry,
                vec![route(
                    &format!("r_{id}"),
                    &[entry_tds, "shared"],
                    &[run, 120],
                    &[],
                )],
                30,
            )
        };
        let world = world_from(
            network,
            vec![mk("a", "in_a", 0, 60), mk("b", "in_b", 130, 60)],
        )
        .unwrap();
        let state = state_with(&world, &[("a", 100)]);
        let ts = state.emit_traffic_state(2400);

        let (cen_plan, _) = CenTms::new(Budget::default())
            .plan(&ts, state.rttp(), &world)
            .unwrap();
        let (fcfs_plan, _) = FcfsTms.plan(&ts, state.rttp(), &world).unwrap();
        let total = |plan: &Rttp| -> i64 {
            plan.paths
                .values()
                .map(|path| {
                    let t = world.train(&path.train_id).unwrap();
                    (path_exit_time(&world, path) - t.scheduled_exit).max(0)
                })
                .sum()
        };
        assert!(total(&cen_plan) <= total(&fcfs_plan));
    }
}
