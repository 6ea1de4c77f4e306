//! Command-line driver: scenario execution, reinforcement-vs-battery
//! comparison tables, and machine-readable outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use gridplan::battopt::{self, BatteryPlan};
use gridplan::costbook::CostBook;
use gridplan::fixtures;
use gridplan::pvgen;
use gridplan::reinforce::{self, ReinforcementPlan};
use gridplan::report::{
    self, BatteryConstraint, ScenarioBundle, ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "gridplan",
    about = "Distribution-grid planning: reinforcement vs. battery storage",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// `--batteries` accepts `auto` (let the optimizer choose the count),
/// `max-N` (at most N) or a plain `N` (exactly N).
#[derive(Clone, Copy, Debug)]
struct BatteriesFlag(BatteryConstraint);

impl FromStr for BatteriesFlag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(BatteriesFlag(BatteryConstraint::Unconstrained));
        }
        if let Some(n) = s.strip_prefix("max-") {
            let n = n.parse().map_err(|_| format!("bad count in {s:?}"))?;
            return Ok(BatteriesFlag(BatteryConstraint::AtMost(n)));
        }
        match s.parse() {
            Ok(n) => Ok(BatteriesFlag(BatteryConstraint::Exactly(n))),
            Err(_) => Err(format!(
                "expected a count, `max-<count>` or `auto`, got {s:?}"
            )),
        }
    }
}

/// Scenario selection shared by the analysis subcommands: a JSON config plus
/// flag overrides for its most commonly varied fields.
#[derive(Args)]
struct ScenarioArgs {
    /// Scenario configuration (JSON)
    #[arg(long)]
    scenario: PathBuf,
    /// Override the grid path from the config
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Override the cost book path from the config
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Override the PV penetration fraction
    #[arg(long)]
    penetration: Option<f64>,
    /// Override the voltage deviation limit (fraction of nominal)
    #[arg(long)]
    v_limit: Option<f64>,
    /// Override the battery count constraint: <n>, max-<n> or auto
    #[arg(long)]
    batteries: Option<BatteriesFlag>,
    /// Allow PV curtailment in the battery optimization
    #[arg(long)]
    curtailment: bool,
}

impl ScenarioArgs {
    fn config(&self) -> Result<ScenarioConfig, CliError> {
        let mut config = ScenarioConfig::load(&self.scenario)?;
        if let Some(grid) = &self.grid {
            config.grid = grid.clone();
        }
        if let Some(costs) = &self.costs {
            config.costs = Some(costs.clone());
        }
        if let Some(p) = self.penetration {
            config.pv_penetration = p;
        }
        if let Some(v) = self.v_limit {
            config.v_deviation_limit = v;
        }
        if let Some(BatteriesFlag(constraint)) = self.batteries {
            config.batteries = constraint;
        }
        if self.curtailment {
            config.allow_curtailment = true;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct OutDir {
    /// Directory for emitted files (created if missing)
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl OutDir {
    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        let file = File::create(&path)?;
        println!("wrote {}", path.display());
        Ok(BufWriter::new(file))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check that a scenario config and every file it references are valid
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Emit the injection series (PV chain output) as injections.csv
    PvProfile {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Report the worst-case analysis window of the scenario
    SelectWindow {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Solve the window load flow and emit voltages_baseline.csv
    Loadflow {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Compute a reinforcement plan; emits reinforcement.json and
    /// voltages_reinforced.csv
    Reinforce {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Optimize battery placement; emits batteries.json and
    /// voltages_batteries.csv
    Place {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the full remedy matrix over penetration x limit scenarios;
    /// emits report.csv/.json, reinforcement.json and batteries.json
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
        /// Penetrations to sweep (default: the config value)
        #[arg(long = "sweep-penetration", value_delimiter = ',')]
        sweep_penetration: Vec<f64>,
        /// Deviation limits to sweep (default: the config value)
        #[arg(long = "sweep-v-limit", value_delimiter = ',')]
        sweep_v_limit: Vec<f64>,
        /// Run scenario cells sequentially instead of concurrently
        #[arg(long)]
        sequential: bool,
    },
    /// Emit per-(hour, bus) voltages with previously computed plans applied
    VoltageProfile {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        out: OutDir,
        /// Apply a reinforcement plan JSON before solving
        #[arg(long)]
        reinforcement_plan: Option<PathBuf>,
        /// Apply a battery plan JSON before solving
        #[arg(long)]
        battery_plan: Option<PathBuf>,
    },
    /// Generate a synthetic grid, injection series and ready-to-run
    /// scenario config
    Synth {
        #[command(flatten)]
        out: OutDir,
        /// RNG seed for the synthesized topology and profiles
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of buses including the transformer busbar
        #[arg(long, default_value_t = 30)]
        buses: usize,
        /// Number of feeders hanging off the busbar
        #[arg(long, default_value_t = 3)]
        feeders: usize,
        /// Days of hourly profile data
        #[arg(long, default_value_t = 2)]
        days: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error(transparent)]
    Grid(#[from] gridplan::grid::GridError),
    #[error(transparent)]
    Reinforce(#[from] reinforce::ReinforceError),
    #[error(transparent)]
    Batt(#[from] battopt::BattError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} comparison cells failed")]
    FailedCells { failed: usize, total: usize },
}

fn write_json<T: serde::Serialize>(
    out: &OutDir,
    name: &str,
    value: &T,
) -> Result<(), CliError> {
    let mut w = out.create(name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn bundle_summary(config: &ScenarioConfig, bundle: &ScenarioBundle) {
    let (lo, hi) = bundle.envelope.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), &(a, b)| (lo.min(a), hi.max(b)),
    );
    println!(
        "window: {} hours from {} (offset {} h)",
        bundle.window.n_hours(),
        bundle.window.timestamps[0].format("%Y-%m-%d %H:%M"),
        bundle.window_start,
    );
    println!(
        "voltage envelope: [{lo:.4}, {hi:.4}] p.u. against [{:.4}, {:.4}]",
        bundle.limits.v_min, bundle.limits.v_max
    );
    println!(
        "baseline violations: {} (penetration {}, limit {})",
        bundle.baseline_violations.len(),
        config.pv_penetration,
        config.v_deviation_limit
    );
}

fn reinforce_bundle(
    bundle: &ScenarioBundle,
    book: &CostBook,
) -> Result<ReinforcementPlan, CliError> {
    Ok(reinforce::reinforce_grid(
        &bundle.grid,
        &bundle.window,
        bundle.limits,
        book,
    )?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { scenario } => {
            let config = scenario.config()?;
            let (grid, series) = report::load_inputs(&config)?;
            config.cost_book()?;
            println!(
                "ok: {} buses, {} segments, {} hours of injections",
                grid.buses.len(),
                grid.segments.len(),
                series.n_hours()
            );
        }
        Command::PvProfile { scenario, out } => {
            let config = scenario.config()?;
            let (_, series) = report::load_inputs(&config)?;
            let scaled = report::scale_series(&series, config.pv_penetration)?;
            scaled.to_csv(out.create("injections.csv")?)?;
        }
        Command::SelectWindow { scenario } => {
            let config = scenario.config()?;
            let (_, series) = report::load_inputs(&config)?;
            let scaled = report::scale_series(&series, config.pv_penetration)?;
            let start = pvgen::select_worst_window(
                &scaled.total_net_kw(),
                config.window_hours.min(scaled.n_hours()),
            )
            .map_err(report::ReportError::Pv)?;
            println!(
                "worst window: {} hours starting at offset {} ({})",
                config.window_hours.min(scaled.n_hours()),
                start,
                scaled.timestamps[start].format("%Y-%m-%d %H:%M")
            );
        }
        Command::Loadflow { scenario, out } => {
            let config = scenario.config()?;
            let bundle = report::run_scenario(&config)?;
            bundle_summary(&config, &bundle);
            report::emit_voltage_profile(
                &bundle,
                None,
                None,
                out.create("voltages_baseline.csv")?,
            )?;
        }
        Command::Reinforce { scenario, out } => {
            let config = scenario.config()?;
            let book = config.cost_book()?;
            let bundle = report::run_scenario(&config)?;
            bundle_summary(&config, &bundle);
            let plan = reinforce_bundle(&bundle, &book)?;
            println!(
                "reinforcement: {} actions, {} k€ capex, {} k€/yr",
                plan.actions.len(),
                report::fmt_keur(plan.total_capex),
                report::fmt_keur(plan.annual_cost)
            );
            write_json(&out, "reinforcement.json", &plan)?;
            report::emit_voltage_profile(
                &bundle,
                Some(&plan),
                None,
                out.create("voltages_reinforced.csv")?,
            )?;
        }
        Command::Place { scenario, out } => {
            let config = scenario.config()?;
            let book = config.cost_book()?;
            let bundle = report::run_scenario(&config)?;
            bundle_summary(&config, &bundle);
            let plan = report::place_with_constraint(
                &bundle,
                config.batteries,
                config.allow_curtailment,
                config.candidate_count,
                &book,
            )?;
            println!(
                "batteries: {} placed, {} k€ capex, {} k€/yr",
                plan.placements.len(),
                report::fmt_keur(plan.capex),
                report::fmt_keur(plan.annual_cost)
            );
            for warning in &plan.warnings {
                eprintln!("warning: {warning}");
            }
            write_json(&out, "batteries.json", &plan)?;
            report::emit_voltage_profile(
                &bundle,
                None,
                Some(&plan),
                out.create("voltages_batteries.csv")?,
            )?;
        }
        Command::Compare {
            scenario,
            out,
            sweep_penetration,
            sweep_v_limit,
            sequential,
        } => {
            let config = scenario.config()?;
            let book = config.cost_book()?;
            let (grid, series) = report::load_inputs(&config)?;
            let penetrations = if sweep_penetration.is_empty() {
                vec![config.pv_penetration]
            } else {
                sweep_penetration
            };
            let v_limits = if sweep_v_limit.is_empty() {
                vec![config.v_deviation_limit]
            } else {
                sweep_v_limit
            };
            let scenarios: Vec<(f64, f64)> = penetrations
                .iter()
                .flat_map(|&p| v_limits.iter().map(move |&v| (p, v)))
                .collect();
            let artifacts = report::compare(
                &grid,
                &series,
                &scenarios,
                config.window_hours,
                config.allow_curtailment,
                config.candidate_count,
                !sequential,
                &book,
            )?;
            artifacts.report.to_csv(out.create("report.csv")?)?;
            write_json(&out, "report.json", &artifacts.report)?;
            write_json(&out, "reinforcement.json", &artifacts.reinforcements)?;
            write_json(&out, "batteries.json", &artifacts.battery_plans)?;
            let failed = artifacts.report.failed_cells();
            if !failed.is_empty() {
                for cell in &failed {
                    eprintln!("failed: {cell}");
                }
                return Err(CliError::FailedCells {
                    failed: failed.len(),
                    total: 4 * scenarios.len(),
                });
            }
        }
        Command::VoltageProfile {
            scenario,
            out,
            reinforcement_plan,
            battery_plan,
        } => {
            let config = scenario.config()?;
            let bundle = report::run_scenario(&config)?;
            let reinforcement: Option<ReinforcementPlan> =
                read_json(reinforcement_plan.as_deref())?;
            let batteries: Option<BatteryPlan> =
                read_json(battery_plan.as_deref())?;
            let name = match (&reinforcement, &batteries) {
                (None, None) => "voltages_baseline.csv",
                (Some(_), None) => "voltages_reinforced.csv",
                (None, Some(_)) => "voltages_batteries.csv",
                (Some(_), Some(_)) => "voltages_combined.csv",
            };
            report::emit_voltage_profile(
                &bundle,
                reinforcement.as_ref(),
                batteries.as_ref(),
                out.create(name)?,
            )?;
        }
        Command::Synth {
            out,
            seed,
            buses,
            feeders,
            days,
        } => {
            let grid = fixtures::synth_radial(buses, feeders, seed);
            let series = fixtures::scenario(&grid, 20.0, 1.0, 1.0, days, seed);
            write_json(&out, "grid.json", &grid)?;
            series.to_csv(out.create("injections.csv")?)?;
            let config = ScenarioConfig {
                grid: out.out_dir.join("grid.json"),
                injections: Some(out.out_dir.join("injections.csv")),
                ..template_config()
            };
            write_json(&out, "scenario.json", &config)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(
    path: Option<&Path>,
) -> Result<Option<T>, CliError> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Ok(Some(serde_json::from_str(&text)?))
        }
        None => Ok(None),
    }
}

/// Defaults for generated scenario configs; the JSON schema's own defaults
/// are deliberately repeated so the emitted file is fully explicit.
fn template_config() -> ScenarioConfig {
    serde_json::from_str(r#"{ "grid": "", "injections": "" }"#)
        .expect("minimal config parses")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
