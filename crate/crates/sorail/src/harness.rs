//! The self-organizing traffic-management system assembled from perception,
//! hypothesis generation, consensus, and merge — plus the experiment batch
//! runner that produces metrics rows and simulation logs.

use std::collections::{BTreeMap, BTreeSet};

use crate::baselines::{CenTms, FcfsTms};
use crate::consensus::{
    build_hypothesis_graph, run_consensus, ConsensusCfg, DEFAULT_MAX_ITERATIONS,
};
use crate::infra::{Occupation, Rttp, RouteId, Secs, TimedPath, TrainId, World};
use crate::merge::merge_selected;
use crate::metrics::{
    compute_regret, count_quasi_conflicts, improvement_pct, records_to_csv, MetricsRecord,
};
use crate::perception::{
    build_interaction_graph, identify_neighbors, predict_occupations, NeighborhoodConfig,
    DEFAULT_HORIZON,
};
use crate::scenario::Scenario;
use crate::sim::{run_closed_loop, SimulationLog, Tms, TmsDiagnostics, TrafficState};
use crate::solver::{
    generate_hypotheses, reproject, share_hypotheses, Budget, HypoCfg, Hypothesis,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// The self-organizing TMS
// ---------------------------------------------------------------------------

/// Tuning of one self-organizing planner instance.
#[derive(Debug, Clone)]
pub struct SoCfg {
    /// Interaction horizon: how far ahead trains look for conflicts, and how
    /// far merge conflicts must be repaired rather than tolerated.
    pub t_h: Secs,
    pub hypo: HypoCfg,
    pub max_iterations: u64,
    pub repair_budget: Budget,
    /// Base seed; each planning call advances the consensus stream.
    pub seed: u64,
}

impl Default for SoCfg {
    fn default() -> Self {
        SoCfg {
            t_h: DEFAULT_HORIZON,
            hypo: HypoCfg::default(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            repair_budget: Budget::default(),
            seed: 0,
        }
    }
}

/// Traffic management by local negotiation: every train entering within the
/// horizon optimizes its own neighborhood, shares hypotheses, and a voter
/// consensus picks one hypothesis per train before the control center
/// merges and repairs the result.
pub struct SoTms {
    cfg: SoCfg,
    calls: u64,
}

impl SoTms {
    pub fn new(cfg: SoCfg) -> Self {
        SoTms { cfg, calls: 0 }
    }
}

impl Tms for SoTms {
    fn name(&self) -> &str {
        "so"
    }

    fn plan(
        &mut self,
        ts: &TrafficState,
        current: &Rttp,
        world: &World,
    ) -> Result<(Rttp, TmsDiagnostics)> {
        let call = self.calls;
        self.calls += 1;
        let now = ts.now;
        let mut diag = TmsDiagnostics::default();

        // Re-time the installed plan to the current state; this is both the
        // fallback output and the baseline every hypothesis builds on.
        let projected = reproject(world, ts, current)?;
        if ts.trains.is_empty() {
            diag.note = "no visible traffic; projection kept".into();
            return Ok((projected, diag));
        }

        // Focal trains: inside the area, or entering within the horizon.
        let focal: BTreeSet<TrainId> = ts
            .trains
            .iter()
            .filter(|(_, v)| {
                v.position.is_some()
                    || v.expected_entry.map_or(false, |e| e <= now + self.cfg.t_h)
            })
            .map(|(t, _)| t.clone())
            .collect();
        diag.gauges.insert("focal".into(), focal.len() as f64);
        if focal.is_empty() {
            diag.note = "no train is due within the horizon; projection kept".into();
            return Ok((projected, diag));
        }

        // Perception: predicted occupations and the interaction graph.
        let occ = predict_occupations(world, ts)?;
        let ncfg = NeighborhoodConfig {
            t_h: self.cfg.t_h,
            ..NeighborhoodConfig::default()
        };
        let mut neighborhoods = BTreeMap::new();
        for t in &focal {
            neighborhoods.insert(t.clone(), identify_neighbors(world, t, &occ, &ncfg, now));
        }
        let g_i = build_interaction_graph(&neighborhoods);
        diag.interaction_edges = g_i.edges.iter().cloned().collect();
        diag.gauges.insert("edges".into(), g_i.edges.len() as f64);
        diag.gauges
            .insert("components".into(), g_i.components.len() as f64);

        // Every train knows its own weight exactly and estimates everyone
        // else's from the published category band.
        let mut public: BTreeMap<TrainId, f64> = BTreeMap::new();
        for id in ts.trains.keys() {
            let (lo, hi) = world.train(id)?.category.weight_interval();
            public.insert(id.clone(), (lo + hi) / 2.0);
        }
        let mut evaluators: BTreeMap<TrainId, BTreeMap<TrainId, f64>> = BTreeMap::new();
        for t in &focal {
            let mut m = public.clone();
            m.insert(t.clone(), world.train(t)?.weight);
            evaluators.insert(t.clone(), m);
        }

        // Hypothesis generation per focal train, then one sharing round.
        let mut all_h: BTreeMap<TrainId, Vec<Hypothesis>> = BTreeMap::new();
        let mut degraded = 0u64;
        for t in &focal {
            let (hs, was_degraded) = generate_hypotheses(
                world,
                ts,
                &projected,
                t,
                &neighborhoods[t],
                &evaluators[t],
                &self.cfg.hypo,
            )?;
            if was_degraded {
                degraded += 1;
            }
            all_h.insert(t.clone(), hs);
        }
        diag.gauges.insert("degraded".into(), degraded as f64);
        let edge_list: Vec<(TrainId, TrainId)> = g_i.edges.iter().cloned().collect();
        let shared = share_hypotheses(world, &all_h, &edge_list, &evaluators)?;

        // Selection by voter consensus over the hypothesis graph.
        let g_h = build_hypothesis_graph(&shared, &g_i)?;
        let outcome = run_consensus(
            &g_i,
            &g_h,
            &shared,
            &ConsensusCfg {
                max_iterations: self.cfg.max_iterations,
                seed: self.cfg.seed.wrapping_add(call),
            },
        )?;
        diag.gauges.insert("consensus_calls".into(), 1.0);
        diag.gauges
            .insert("consensus_trains".into(), g_i.nodes.len() as f64);
        diag.gauges
            .insert("immediate".into(), f64::from(u8::from(outcome.immediate)));
        diag.gauges.insert(
            "converged".into(),
            f64::from(u8::from(outcome.all_converged)),
        );
        diag.gauges.insert(
            "decision_steps".into(),
            outcome.decision_steps.values().sum::<u64>() as f64,
        );
        diag.gauges
            .insert("switches".into(), outcome.switches as f64);

        // Regret against the exhaustively enumerated optimum, whenever every
        // converged component is small enough to enumerate.
        let regrets = compute_regret(&g_i, &g_h, &outcome, &shared);
        let known: Vec<f64> = regrets.iter().filter_map(|r| r.regret_pct).collect();
        if !regrets.is_empty() && known.len() == regrets.len() {
            let max = known.iter().copied().fold(0.0, f64::max);
            let mean = known.iter().sum::<f64>() / known.len() as f64;
            diag.gauges.insert("regret_max_pct".into(), max);
            diag.gauges.insert("regret_mean_pct".into(), mean);
            diag.gauges
                .insert("optimal".into(), if max <= 1e-9 { 1.0 } else { 0.0 });
        }

        // Install the selections, repair residual conflicts.
        let report = merge_selected(
            world,
            ts,
            &projected,
            &outcome,
            &shared,
            self.cfg.t_h,
            self.cfg.repair_budget,
        )?;
        diag.gauges
            .insert("replaced".into(), report.replaced_trains.len() as f64);
        diag.gauges
            .insert("overlaps".into(), report.overlaps_found.len() as f64);
        diag.gauges
            .insert("repaired".into(), f64::from(u8::from(report.repaired)));
        diag.gauges
            .insert("fallback".into(), f64::from(u8::from(report.fallback)));

        let mut notes = vec![format!(
            "{} focal, {} interaction edges, {} components",
            focal.len(),
            g_i.edges.len(),
            g_i.components.len()
        )];
        if degraded > 0 {
            notes.push(format!("{degraded} degraded generations"));
        }
        if !outcome.all_converged {
            notes.push("consensus incomplete; unconverged trains keep the projection".into());
        }
        if report.repaired {
            notes.push("merge repaired residual conflicts".into());
        }
        if report.fallback {
            notes.push("repair infeasible; projection kept".into());
        }
        diag.note = notes.join("; ");
        Ok((report.output, diag))
    }
}

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

/// Shared settings of one experiment batch.
#[derive(Debug, Clone)]
pub struct BatchCfg {
    /// Re-planning period of the closed loop (s).
    pub period: Secs,
    /// Traffic-state lookahead (s).
    pub lookahead: Secs,
    pub so: SoCfg,
    /// Node budget of the centralized baseline.
    pub cen_budget: Budget,
}

impl Default for BatchCfg {
    fn default() -> Self {
        BatchCfg {
            period: 300,
            lookahead: 2400,
            so: SoCfg::default(),
            cen_budget: Budget::default(),
        }
    }
}

/// Instantiates a planner by name: `so`, `cen`, or `fcfs`. The
/// self-organizing planner folds the scenario seed into its own so that
/// batches stay deterministic yet scenarios decorrelate.
pub fn make_tms(name: &str, cfg: &BatchCfg, scenario_seed: u64) -> Result<Box<dyn Tms>> {
    match name {
        "so" => Ok(Box::new(SoTms::new(SoCfg {
            seed: cfg.so.seed ^ scenario_seed,
            ..cfg.so.clone()
        }))),
        "cen" => Ok(Box::new(CenTms::new(cfg.cen_budget))),
        "fcfs" => Ok(Box::new(FcfsTms)),
        other => Err(Error::InvalidInput(format!("unknown TMS: {other}"))),
    }
}

/// Everything a batch produces: one metrics row per (scenario, planner) and
/// the full simulation logs, in run order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<MetricsRecord>,
    pub logs: Vec<SimulationLog>,
}

impl BatchOutcome {
    pub fn csv(&self) -> String {
        records_to_csv(&self.records)
    }
}

/// Runs every scenario under every named planner, collecting a metrics row
/// per pair. A failed run becomes a row-level error and the batch continues.
/// Improvement columns are filled on each scenario's `so` row against the
/// baselines that completed without deadlocking.
pub fn batch_run(
    scenarios: &[Scenario],
    tms_names: &[&str],
    cfg: &BatchCfg,
) -> Result<BatchOutcome> {
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut logs = Vec::new();
    for (idx, sc) in scenarios.iter().enumerate() {
        let scenario_name = format!("s{idx:02}");
        let first_row = records.len();
        // (weighted, unweighted, deadlocked) per completed planner.
        let mut totals: BTreeMap<String, (f64, Secs, bool)> = BTreeMap::new();
        for name in tms_names {
            let mut tms = make_tms(name, cfg, sc.seed)?;
            let record = match run_closed_loop(sc, tms.as_mut(), cfg.period, cfg.lookahead) {
                Ok(log) => {
                    let r = record_from_log(&scenario_name, name, &log);
                    totals.insert(
                        (*name).to_string(),
                        (r.weighted_delay, r.delay, r.deadlock),
                    );
                    logs.push(log);
                    r
                }
                Err(e) => MetricsRecord {
                    scenario: scenario_name.clone(),
                    seed: sc.seed,
                    tms: (*name).to_string(),
                    error: Some(e.to_string()),
                    ..MetricsRecord::default()
                },
            };
            records.push(record);
        }
        if let Some(&(so_w, so_d, so_dead)) = totals.get("so") {
            if !so_dead {
                for rec in &mut records[first_row..] {
                    if rec.tms != "so" {
                        continue;
                    }
                    if let Some(&(bw, bd, dead)) = totals.get("fcfs") {
                        if !dead {
                            rec.improvement_weighted_vs_fcfs_pct = improvement_pct(bw, so_w);
                            rec.improvement_delay_vs_fcfs_pct =
                                improvement_pct(bd as f64, so_d as f64);
                        }
                    }
                    if let Some(&(bw, bd, dead)) = totals.get("cen") {
                        if !dead {
                            rec.improvement_weighted_vs_cen_pct = improvement_pct(bw, so_w);
                            rec.improvement_delay_vs_cen_pct =
                                improvement_pct(bd as f64, so_d as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(BatchOutcome { records, logs })
}

/// Realized occupations of a finished run, viewed as a plan so that the
/// shared conflict scans apply to what actually happened on the ground.
pub fn realized_rttp(log: &SimulationLog) -> Rttp {
    let mut rttp = Rttp {
        paths: BTreeMap::new(),
        horizon_start: log.start_time,
    };
    for (id, rec) in &log.trains {
        if rec.visits.is_empty() {
            continue;
        }
        rttp.paths.insert(
            id.clone(),
            TimedPath {
                train_id: id.clone(),
                route_id: RouteId::new("realized"),
                occupations: rec
                    .visits
                    .iter()
                    .map(|v| Occupation {
                        tds: v.tds.clone(),
                        start: v.entry,
                        end: v.exit.unwrap_or(log.end_time),
                    })
                    .collect(),
            },
        );
    }
    rttp
}

/// Flattens one run's log into a metrics row: delay totals, quasi-conflicts
/// over the realized occupations, and aggregates of the per-call gauges.
/// Distills one completed run into its metrics row: exit delays, weighted
/// totals, quasi-conflicts on the realized occupations, and — for the
/// self-organizing planner — the per-call diagnostics aggregated over the
/// closed loop.
pub fn record_from_log(scenario: &str, tms: &str, log: &SimulationLog) -> MetricsRecord {
    let delays: BTreeMap<TrainId, Secs> = log
        .trains
        .iter()
        .map(|(id, r)| (id.clone(), r.exit_delay.unwrap_or(0)))
        .collect();
    let qc = count_quasi_conflicts(&realized_rttp(log), &delays);

    let mut gap_sum = 0.0;
    let mut gap_n = 0u64;
    let mut repaired = 0u64;
    let mut consensus_calls = 0u64;
    let mut immediate_calls = 0u64;
    let mut steps_sum = 0.0;
    let mut trains_sum = 0.0;
    let mut regret_means = Vec::new();
    let mut regret_max: Option<f64> = None;
    let mut optimal_known = false;
    let mut optimal_calls = 0u64;
    for l in &log.loops {
        let g = &l.diagnostics.gauges;
        if let Some(v) = g.get("gap") {
            gap_sum += v;
            gap_n += 1;
        }
        if g.get("repaired").copied().unwrap_or(0.0) >= 0.5 {
            repaired += 1;
        }
        if g.get("consensus_calls").copied().unwrap_or(0.0) >= 0.5 {
            consensus_calls += 1;
            immediate_calls += u64::from(g.get("immediate").copied().unwrap_or(0.0) >= 0.5);
            steps_sum += g.get("decision_steps").copied().unwrap_or(0.0);
            trains_sum += g.get("consensus_trains").copied().unwrap_or(0.0);
        }
        if let Some(m) = g.get("regret_mean_pct") {
            regret_means.push(*m);
        }
        if let Some(m) = g.get("regret_max_pct").copied() {
            regret_max = Some(regret_max.map_or(m, |x| x.max(m)));
        }
        if let Some(o) = g.get("optimal") {
            optimal_known = true;
            optimal_calls += u64::from(*o >= 0.5);
        }
    }
    let is_so = consensus_calls > 0;
    MetricsRecord {
        scenario: scenario.to_string(),
        seed: log.seed,
        tms: tms.to_string(),
        trains: log.trains.len(),
        weighted_delay: log.total_weighted_delay(),
        delay: log.total_delay(),
        quasi_conflicts: qc.count(),
        quasi_pairs: qc.pairs.len(),
        mean_gap: (gap_n > 0).then(|| gap_sum / gap_n as f64),
        repair_rate: (is_so && !log.loops.is_empty())
            .then(|| repaired as f64 / log.loops.len() as f64),
        consensus_calls,
        immediate_calls,
        optimal_calls: optimal_known.then_some(optimal_calls),
        decision_steps_mean: (trains_sum > 0.0).then(|| steps_sum / trains_sum),
        regret_mean_pct: (!regret_means.is_empty())
            .then(|| regret_means.iter().sum::<f64>() / regret_means.len() as f64),
        regret_max_pct: regret_max,
        improvement_weighted_vs_fcfs_pct: None,
        improvement_delay_vs_fcfs_pct: None,
        improvement_weighted_vs_cen_pct: None,
        improvement_delay_vs_cen_pct: None,
        deadlock: log.deadlock.is_some(),
        error: None,
    }
}
