use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use coop_ead::engine::{run_simulation_with, Policy, SimOptions, SimulationOutput, CSV_HEADER};
use coop_ead::metrics::{build_report, compare, EnergyModel, MetricsReport};
use coop_ead::Scenario;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "coop-ead", version, about = "Cooperative eco-approach and departure simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one policy and write its trajectories and metrics.
    Run(RunArgs),
    /// Simulate both policies and write a side-by-side comparison.
    Compare(CompareArgs),
    /// Check that a scenario file parses and is consistent.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Coop,
    Ego,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Coop => Policy::Coop,
            PolicyArg::Ego => Policy::Ego,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Emit {
    Profiles,
}

#[derive(clap::Args, Debug)]
struct SimArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Integration step override (s).
    #[arg(long)]
    dt: Option<f64>,
    /// Number of full green windows considered for sequencing.
    #[arg(long)]
    horizon: Option<usize>,
    /// JSON file with energy-model coefficients; the built-in table otherwise.
    #[arg(long)]
    energy_model: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    /// Extra artifacts to write.
    #[arg(long, value_enum)]
    emit: Vec<Emit>,
}

#[derive(clap::Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    sim: SimArgs,
}

/// Scenario, options and energy model shared by `run` and `compare`.
struct Prepared {
    scenario: Scenario,
    options: SimOptions,
    model: EnergyModel,
}

fn prepare(args: &SimArgs) -> Result<Prepared> {
    let scenario = Scenario::from_path(&args.scenario)?;
    let model = match &args.energy_model {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read energy model `{}`", path.display()))?;
            EnergyModel::from_json_str(&text).with_context(|| format!("energy model `{}`", path.display()))?
        }
        None => EnergyModel::default(),
    };
    let fleet_max = |f: fn(&coop_ead::scenario::VehicleSpec) -> f64| scenario.fleet.iter().map(f).fold(0.0, f64::max);
    model
        .validate(scenario.speed_limit(), fleet_max(|v| v.d_max), fleet_max(|v| v.a_max))
        .context("energy model is not usable for this scenario")?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create output directory `{}`", args.out.display()))?;
    Ok(Prepared {
        scenario,
        options: SimOptions {
            dt: args.dt,
            horizon: args.horizon,
        },
        model,
    })
}

fn simulate(p: &Prepared, policy: Policy) -> Result<(SimulationOutput, MetricsReport)> {
    let out = run_simulation_with(&p.scenario, policy, &p.options).with_context(|| format!("{policy} simulation failed"))?;
    let report = build_report(&out.log, &out.windows, &p.model);
    Ok((out, report))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write `{}`", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

/// Re-reads a trajectory file and checks its header and row shape.
fn check_csv(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(CSV_HEADER), "`{}` has an unexpected header", path.display());
    let columns = CSV_HEADER.split(',').count();
    for (n, line) in lines.enumerate() {
        ensure!(
            line.split(',').count() == columns,
            "`{}` line {} has the wrong number of fields",
            path.display(),
            n + 2
        );
    }
    Ok(())
}

/// Re-reads a JSON artifact and checks that the listed top-level keys exist.
fn check_json(path: &Path, keys: &[&str]) -> Result<()> {
    let value: Value = serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("`{}` is not valid JSON", path.display()))?;
    for key in keys {
        if value.get(key).is_none() {
            bail!("`{}` lacks the `{key}` field", path.display());
        }
    }
    Ok(())
}

const REPORT_KEYS: [&str; 4] = ["throughput", "per_vehicle", "totals", "deltas"];

fn cmd_run(args: &RunArgs) -> Result<()> {
    let prepared = prepare(&args.sim)?;
    let policy = Policy::from(args.policy);
    let (out, report) = simulate(&prepared, policy)?;
    let dir = &args.sim.out;

    let csv_path = dir.join("trajectories.csv");
    write(&csv_path, &out.log.to_csv())?;
    check_csv(&csv_path)?;
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &report)?;
    check_json(&metrics_path, &REPORT_KEYS)?;
    if args.emit.contains(&Emit::Profiles) {
        let path = dir.join("profiles.json");
        write_json(
            &path,
            &json!({
                "policy": policy,
                "profiles": out.profiles,
                "lane_changes": out.lane_changes,
                "clusters": out.plan.clusters,
            }),
        )?;
        check_json(&path, &["policy", "profiles", "lane_changes", "clusters"])?;
    }

    println!(
        "{policy}: window 1 = {}, window 2 = {}, energy = {:.1} kJ ({:.1} kJ/vehicle)",
        report.throughput.window_1, report.throughput.window_2, report.totals.energy_kj, report.totals.energy_per_vehicle_kj
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let prepared = prepare(&args.sim)?;
    // the two runs share nothing mutable
    let (ego, coop) = std::thread::scope(|s| {
        let ego = s.spawn(|| simulate(&prepared, Policy::Ego));
        let coop = simulate(&prepared, Policy::Coop);
        (ego.join().expect("ego run panicked"), coop)
    });
    let ((ego_out, ego_report), (coop_out, coop_report)) = (ego?, coop?);
    let dir = &args.sim.out;

    for (out, name) in [(&ego_out, "trajectories_ego.csv"), (&coop_out, "trajectories_coop.csv")] {
        let path = dir.join(name);
        write(&path, &out.log.to_csv())?;
        check_csv(&path)?;
    }
    let comparison = compare(ego_report, coop_report)?;
    let path = dir.join("comparison.json");
    write_json(&path, &comparison)?;
    check_json(&path, &["ego", "coop", "deltas"])?;

    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:+.2}%"));
    let d = &comparison.deltas;
    println!(
        "window 1: ego {} / coop {} ({}), energy per vehicle: ego {:.1} / coop {:.1} kJ (saving {})",
        comparison.ego.throughput.window_1,
        comparison.coop.throughput.window_1,
        pct(d.throughput_window_1_pct),
        comparison.ego.totals.energy_per_vehicle_kj,
        comparison.coop.totals.energy_per_vehicle_kj,
        pct(d.energy_per_vehicle_pct)
    );
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    let scenario = Scenario::from_path(path)?;
    let windows = scenario.green_windows(0.0);
    let first = windows.get(0).map_or_else(|| "none".to_owned(), |w| format!("[{}, {}]", w.start_s, w.end_s));
    println!(
        "{}: {} vehicles on {} lanes, speed limit {:.2} m/s, first green window {first}",
        path.display(),
        scenario.fleet.len(),
        scenario.road.lane_count,
        scenario.speed_limit()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate { scenario } => cmd_validate(scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
