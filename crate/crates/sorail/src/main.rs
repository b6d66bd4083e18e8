//! `sorail` — closed-loop railway dispatching experiments from the command
//! line: generate perturbed scenarios, run a planner against them, batch
//! whole comparisons, solve dumped sub-instances, and summarize logs.
//!
//! Every command exits 0 on success; any failure prints a single-line JSON
//! error record to stderr and exits 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sorail::harness::{batch_run, make_tms, record_from_log, BatchCfg, SoCfg};
use sorail::infra::Secs;
use sorail::io;
use sorail::metrics::{records_to_csv, MetricsRecord};
use sorail::scenario::{sample_perturbation, PerturbationModel};
use sorail::sim::run_closed_loop;
use sorail::solver::{solve, Budget, SolveCfg};
use sorail::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sorail",
    version,
    about = "Self-organizing railway traffic management: scenario generation, closed-loop simulation, and planner comparison"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a perturbed scenario from a world document.
    ///
    /// The referenced timetable is compressed to its conflict-free
    /// reference, through-trains are split at their stops into stock-linked
    /// legs, and every leg draws an entrance delay from the empirical
    /// delay-bucket model.
    Gen {
        /// World document path, or builtin:<name> (builtin:corridor,
        /// builtin:line).
        #[arg(long)]
        network: String,
        /// Perturbation sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario document to write.
        #[arg(long)]
        out: PathBuf,
    },

    /// Simulate one scenario under one planner and write the log.
    Run {
        /// Scenario document produced by `gen` (or hand-written).
        #[arg(long)]
        scenario: PathBuf,
        /// Planner: so (self-organizing), cen (centralized), fcfs.
        #[arg(long)]
        tms: String,
        /// Re-planning period (s).
        #[arg(long, default_value_t = 300)]
        period: Secs,
        /// Traffic-state lookahead (s).
        #[arg(long, default_value_t = 2400)]
        lookahead: Secs,
        /// Planner seed (folded with the scenario seed; only `so` draws
        /// random numbers).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Node budget of the centralized planner.
        #[arg(long)]
        cen_nodes: Option<u64>,
        /// Simulation log to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write a one-row metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },

    /// Run a seeded batch of scenarios under several planners.
    Batch {
        /// World document path, or builtin:<name>.
        #[arg(long)]
        network: String,
        /// Number of scenarios to sample.
        #[arg(long, default_value_t = 20)]
        scenarios: usize,
        /// First scenario seed; scenario i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated planners to compare.
        #[arg(long, default_value = "so,cen,fcfs")]
        tms: String,
        /// Re-planning period (s).
        #[arg(long, default_value_t = 300)]
        period: Secs,
        /// Traffic-state lookahead (s).
        #[arg(long, default_value_t = 2400)]
        lookahead: Secs,
        /// Node budget of the centralized planner.
        #[arg(long)]
        cen_nodes: Option<u64>,
        /// Metrics CSV to write.
        #[arg(long)]
        metrics: PathBuf,
        /// Directory for the individual simulation logs (optional).
        #[arg(long)]
        logs: Option<PathBuf>,
    },

    /// Solve a dumped sub-instance exactly and print the result as JSON.
    Solve {
        /// Sub-instance document.
        #[arg(long)]
        instance: PathBuf,
        /// Node-expansion budget.
        #[arg(long, default_value_t = Budget::default().nodes)]
        time_limit_nodes: u64,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Summarize simulation logs as metric rows.
    Report {
        /// Simulation logs to read.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Print the rows as a JSON array instead of text.
        #[arg(long)]
        json: bool,
        /// Also write the rows as a metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { network, seed, out } => gen(&network, seed, &out),
        Cmd::Run {
            scenario,
            tms,
            period,
            lookahead,
            seed,
            cen_nodes,
            out,
            metrics,
        } => run(
            &scenario,
            &tms,
            period,
            lookahead,
            seed,
            cen_nodes,
            &out,
            metrics.as_deref(),
        ),
        Cmd::Batch {
            network,
            scenarios,
            seed,
            tms,
            period,
            lookahead,
            cen_nodes,
            metrics,
            logs,
        } => batch(
            &network, scenarios, seed, &tms, period, lookahead, cen_nodes, &metrics,
            logs.as_deref(),
        ),
        Cmd::Solve {
            instance,
            time_limit_nodes,
            out,
        } => solve_cmd(&instance, time_limit_nodes, out.as_deref()),
        Cmd::Report { logs, json, metrics } => report(&logs, json, metrics.as_deref()),
    }
}

fn gen(network: &str, seed: u64, out: &std::path::Path) -> Result<()> {
    let world = io::resolve_world(network, None)?;
    let prepared = io::prepare_world(world)?;
    let scenario = sample_perturbation(prepared, &PerturbationModel::reference(), seed)?;
    let trains = scenario.world.timetable.trains.len();
    let total: Secs = scenario.entrance_delays.values().sum();
    let doc = io::ScenarioDoc {
        network: network.to_string(),
        prepare: true,
        seed,
        entrance_delays: scenario.entrance_delays,
    };
    io::save_scenario(&doc, out)?;
    println!(
        "wrote {}: {trains} trains, {total} s total entrance delay (seed {seed})",
        out.display()
    );
    Ok(())
}

fn cfg_for(period: Secs, lookahead: Secs, seed: u64, cen_nodes: Option<u64>) -> BatchCfg {
    BatchCfg {
        period,
        lookahead,
        so: SoCfg {
            seed,
            ..SoCfg::default()
        },
        cen_budget: cen_nodes.map_or_else(Budget::default, |nodes| Budget { nodes }),
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    scenario_path: &std::path::Path,
    tms_name: &str,
    period: Secs,
    lookahead: Secs,
    seed: u64,
    cen_nodes: Option<u64>,
    out: &std::path::Path,
    metrics: Option<&std::path::Path>,
) -> Result<()> {
    let scenario = io::load_scenario(scenario_path)?;
    let cfg = cfg_for(period, lookahead, seed, cen_nodes);
    let mut tms = make_tms(tms_name, &cfg, scenario.seed)?;
    let log = run_closed_loop(&scenario, tms.as_mut(), period, lookahead)?;
    io::save_log(&log, out)?;
    let name = stem(scenario_path);
    let record = record_from_log(&name, tms_name, &log);
    println!(
        "wrote {}: tms={tms_name} trains={} weighted_delay={} delay={} deadlock={}",
        out.display(),
        record.trains,
        record.weighted_delay,
        record.delay,
        record.deadlock
    );
    if let Some(path) = metrics {
        fs::write(path, records_to_csv(&[record]))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn batch(
    network: &str,
    count: usize,
    seed_base: u64,
    tms_list: &str,
    period: Secs,
    lookahead: Secs,
    cen_nodes: Option<u64>,
    metrics: &std::path::Path,
    logs_dir: Option<&std::path::Path>,
) -> Result<()> {
    let names: Vec<&str> = tms_list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidInput("no planners given".into()));
    }
    let cfg = cfg_for(period, lookahead, 0, cen_nodes);
    for name in &names {
        make_tms(name, &cfg, 0)?;
    }

    let world = io::prepare_world(io::resolve_world(network, None)?)?;
    let model = PerturbationModel::reference();
    let scenarios = (0..count)
        .map(|i| sample_perturbation(world.clone(), &model, seed_base + i as u64))
        .collect::<Result<Vec<_>>>()?;

    let outcome = batch_run(&scenarios, &names, &cfg)?;
    fs::write(metrics, outcome.csv())?;
    println!(
        "wrote {}: {} rows ({} scenarios x {})",
        metrics.display(),
        outcome.records.len(),
        count,
        names.join(",")
    );
    if let Some(dir) = logs_dir {
        fs::create_dir_all(dir)?;
        for log in &outcome.logs {
            io::save_log(log, dir.join(format!("{}-{}.json", log.tms_name, log.seed)))?;
        }
        println!("wrote {} logs to {}", outcome.logs.len(), dir.display());
    }
    for line in summarize(&outcome.records) {
        println!("{line}");
    }
    Ok(())
}

fn solve_cmd(
    instance: &std::path::Path,
    time_limit_nodes: u64,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let inst = io::load_instance(instance)?;
    let cfg = SolveCfg {
        budget: Budget {
            nodes: time_limit_nodes,
        },
        ..SolveCfg::default()
    };
    let result = solve(&inst, &cfg)?;
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn report(
    logs: &[PathBuf],
    json: bool,
    metrics: Option<&std::path::Path>,
) -> Result<()> {
    let mut records = Vec::with_capacity(logs.len());
    for path in logs {
        let log = io::load_log(path)?;
        let tms = log.tms_name.clone();
        records.push(record_from_log(&stem(path), &tms, &log));
    }
    if json {
        let mut text = serde_json::to_string_pretty(&records)?;
        text.push('\n');
        print!("{text}");
    } else {
        for r in &records {
            let mut line = format!(
                "{}: tms={} trains={} weighted_delay={} delay={} quasi_conflicts={} deadlock={}",
                r.scenario, r.tms, r.trains, r.weighted_delay, r.delay, r.quasi_conflicts,
                r.deadlock
            );
            if r.consensus_calls > 0 {
                line.push_str(&format!(
                    " consensus_calls={} immediate={} steps_mean={}",
                    r.consensus_calls,
                    r.immediate_calls,
                    r.decision_steps_mean.unwrap_or(0.0)
                ));
            }
            println!("{line}");
        }
        for line in summarize(&records) {
            println!("{line}");
        }
    }
    if let Some(path) = metrics {
        fs::write(path, records_to_csv(&records))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Per-planner means over the successful rows, for a quick read of a batch.
fn summarize(records: &[MetricsRecord]) -> Vec<String> {
    let mut by_tms: BTreeMap<&str, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        by_tms.entry(&r.tms).or_default().push(r);
    }
    let mut out = Vec::new();
    for (tms, rows) in by_tms {
        let n = rows.len() as f64;
        let weighted: f64 = rows.iter().map(|r| r.weighted_delay).sum::<f64>() / n;
        let delay: f64 = rows.iter().map(|r| r.delay as f64).sum::<f64>() / n;
        let deadlocks = rows.iter().filter(|r| r.deadlock).count();
        let mut line = format!(
            "{tms}: n={} mean_weighted_delay={weighted:.1} mean_delay={delay:.1} deadlocks={deadlocks}",
            rows.len()
        );
        let improvements: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.improvement_weighted_vs_fcfs_pct)
            .collect();
        if !improvements.is_empty() {
            let mean = improvements.iter().sum::<f64>() / improvements.len() as f64;
            line.push_str(&format!(" mean_improvement_vs_fcfs={mean:.1}%"));
        }
        out.push(line);
    }
    out
}

fn stem(path: &std::path::Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}
