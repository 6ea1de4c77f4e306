//! Scenario execution, reinforcement-vs-battery comparison tables, and
//! machine-readable outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battopt::{self, BatteryPlan, PlacementProblem};
use crate::costbook::CostBook;
use crate::fixtures;
use crate::grid::{GridNetwork, InjectionSeries};
use crate::powerflow::nonlinear_loadflow;
use crate::pvgen::{self, PvSystemParams};
use crate::reinforce::{self, Limits, ReinforcementPlan};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("config: {0}")]
    Config(String),
    #[error("load flow diverged at hour {hour}")]
    Diverged { hour: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Pv(#[from] crate::pvgen::PvError),
    #[error(transparent)]
    Cost(#[from] crate::costbook::CostError),
    #[error(transparent)]
    Reinforce(#[from] crate::reinforce::ReinforceError),
    #[error(transparent)]
    Batt(#[from] crate::battopt::BattError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum BatteryConstraint {
    Unconstrained,
    AtMost(usize),
    Exactly(usize),
}

impl Default for BatteryConstraint {
    fn default() -> Self {
        BatteryConstraint::Unconstrained
    }
}

fn default_v_limit() -> f64 {
    0.05
}
fn default_window_hours() -> usize {
    72
}
fn default_penetration() -> f64 {
    1.0
}
fn default_latitude() -> f64 {
    48.8
}
fn default_longitude() -> f64 {
    9.2
}
fn default_candidate_count() -> usize {
    15
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: PathBuf,
    /// ready-made injection CSV; alternative to the PV chain inputs
    #[serde(default)]
    pub injections: Option<PathBuf>,
    /// irradiance CSV + roof JSON drive the PV chain when `injections` is
    /// absent
    #[serde(default)]
    pub irradiance: Option<PathBuf>,
    #[serde(default)]
    pub roofs: Option<PathBuf>,
    /// base load CSV added on top of generated PV injections (optional)
    #[serde(default)]
    pub base_load: Option<PathBuf>,
    #[serde(default = "default_latitude")]
    pub latitude: f64,
    #[serde(default = "default_longitude")]
    pub longitude: f64,
    #[serde(default = "default_penetration")]
    pub pv_penetration: f64,
    #[serde(default = "default_v_limit")]
    pub v_deviation_limit: f64,
    #[serde(default)]
    pub batteries: BatteryConstraint,
    #[serde(default)]
    pub allow_curtailment: bool,
    #[serde(default)]
    pub costs: Option<PathBuf>,
    #[serde(default = "default_window_hours")]
    pub window_hours: usize,
    #[serde(default = "default_candidate_count")]
    pub candidate_count: usize,
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)?;
        let config: ScenarioConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if !(0.0..=1.0).contains(&self.pv_penetration) {
            return Err(ReportError::Config(format!(
                "pv_penetration {} outside [0, 1]",
                self.pv_penetration
            )));
        }
        if self.v_deviation_limit <= 0.0 {
            return Err(ReportError::Config(
                "v_deviation_limit must be positive".into(),
            ));
        }
        if self.window_hours == 0 {
            return Err(ReportError::Config("window_hours is zero".into()));
        }
        if self.injections.is_none()
            && (self.irradiance.is_none() || self.roofs.is_none())
        {
            return Err(ReportError::Config(
                "need either injections or irradiance + roofs".into(),
            ));
        }
        Ok(())
    }

    pub fn limits(&self) -> Limits {
        Limits::symmetric(self.v_deviation_limit)
    }

    pub fn cost_book(&self) -> Result<CostBook, ReportError> {
        Ok(match &self.costs {
            Some(path) => CostBook::load(path)?,
            None => CostBook::default(),
        })
    }
}

/// Everything downstream analyses need about one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub grid: GridNetwork,
    /// worst-case window injections, already penetration-scaled
    pub window: InjectionSeries,
    pub window_start: usize,
    pub limits: Limits,
    /// (bus, window hour, voltage excess p.u.)
    pub baseline_violations: Vec<(usize, usize, f64)>,
    /// per window hour, (min, max) nonlinear bus voltage without remedies
    pub envelope: Vec<(f64, f64)>,
}

/// Scale the generation side of a series by a PV penetration fraction.
/// PV output is proportional to installed capacity, so scaling energy is
/// equivalent to scaling capacity.
pub fn scale_series(
    series: &InjectionSeries,
    fraction: f64,
) -> Result<InjectionSeries, ReportError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ReportError::Config(format!(
            "pv_penetration {fraction} outside [0, 1]"
        )));
    }
    let mut scaled = series.clone();
    for row in &mut scaled.gen {
        for g in row {
            *g *= fraction;
        }
    }
    Ok(scaled)
}

/// Load the grid and the full-penetration injection series referenced by a
/// config; callers scale generation down to the penetrations they study.
pub fn load_inputs(
    config: &ScenarioConfig,
) -> Result<(GridNetwork, InjectionSeries), ReportError> {
    config.validate()?;
    let grid = GridNetwork::load(&config.grid)?;
    let series = full_series(config, &grid)?;
    Ok((grid, series))
}

fn full_series(
    config: &ScenarioConfig,
    grid: &GridNetwork,
) -> Result<InjectionSeries, ReportError> {
    if let Some(path) = &config.injections {
        return Ok(InjectionSeries::from_csv(path, grid.buses.len())?);
    }
    let irradiance = pvgen::load_irradiance(
        config
            .irradiance
            .as_ref()
            .expect("validated: irradiance present"),
    )?;
    let roofs = pvgen::load_roofs(
        config.roofs.as_ref().expect("validated: roofs present"),
    )?;
    let params = PvSystemParams::default();
    let gen = fixtures::pv_injections(
        grid,
        &roofs,
        &irradiance,
        config.latitude,
        config.longitude,
        1.0,
        &params,
    )?;
    let load = match &config.base_load {
        Some(path) => {
            let base = InjectionSeries::from_csv(path, grid.buses.len())?;
            if base.n_hours() != irradiance.len() {
                return Err(ReportError::Config(
                    "base_load length differs from irradiance".into(),
                ));
            }
            base.load
        }
        None => vec![vec![0.0; grid.buses.len()]; irradiance.len()],
    };
    let timestamps = irradiance.iter().map(|r| r.timestamp).collect();
    Ok(InjectionSeries::new(timestamps, load, gen)?)
}

/// Build injections, select the worst window, and screen the baseline.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioBundle, ReportError> {
    let (grid, series) = load_inputs(config)?;
    let scaled = scale_series(&series, config.pv_penetration)?;
    bundle_from_series(&grid, &scaled, config.window_hours, config.limits())
}

/// The in-memory core of `run_scenario`, reused by fixtures and tests.
pub fn bundle_from_series(
    grid: &GridNetwork,
    series: &InjectionSeries,
    window_hours: usize,
    limits: Limits,
) -> Result<ScenarioBundle, ReportError> {
    let window_hours = window_hours.min(series.n_hours());
    let start = pvgen::select_worst_window(&series.total_net_kw(), window_hours)
        .map_err(ReportError::Pv)?;
    let window = series.slice(start, window_hours);
    let s_base = grid.s_base_kva();
    let q = vec![0.0; grid.buses.len()];
    let mut violations = Vec::new();
    let mut envelope = Vec::with_capacity(window_hours);
    for t in 0..window.n_hours() {
        let p: Vec<f64> =
            window.net_kw(t).iter().map(|x| x / s_base).collect();
        let sol = nonlinear_loadflow::<f64>(grid, &p, &q, 1.0)
            .map_err(|_| ReportError::Diverged { hour: t })?;
        if !sol.converged {
            return Err(ReportError::Diverged { hour: t });
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (bus, &v) in sol.v.iter().enumerate() {
            lo = lo.min(v);
            hi = hi.max(v);
            let excess = (v - limits.v_max).max(limits.v_min - v);
            if excess > 0.0 {
                violations.push((bus, t, excess));
            }
        }
        envelope.push((lo, hi));
    }
    Ok(ScenarioBundle {
        grid: grid.clone(),
        window,
        window_start: start,
        limits,
        baseline_violations: violations,
        envelope,
    })
}

pub fn place_with_constraint(
    bundle: &ScenarioBundle,
    constraint: BatteryConstraint,
    allow_curtailment: bool,
    candidate_count: usize,
    book: &CostBook,
) -> Result<BatteryPlan, ReportError> {
    let candidates = battopt::prune_candidates(
        &bundle.grid,
        &bundle.window,
        bundle.limits,
        candidate_count,
    )?;
    if candidates.is_empty() {
        let needs_shells = matches!(constraint, BatteryConstraint::Exactly(n) if n > 0);
        if !needs_shells {
            return Ok(BatteryPlan::empty(bundle.window.n_hours()));
        }
    }
    let all_buses: Vec<usize> = (0..bundle.grid.buses.len())
        .filter(|&b| b != bundle.grid.slack().id)
        .collect();
    let mut problem = PlacementProblem::new(
        &bundle.grid,
        &bundle.window,
        bundle.limits,
        if candidates.is_empty() { all_buses } else { candidates },
    );
    problem.allow_curtailment = allow_curtailment;
    if allow_curtailment {
        problem.curtailment_penalty = 0.01;
    }
    match constraint {
        BatteryConstraint::Unconstrained => {}
        BatteryConstraint::AtMost(n) => problem.max_batteries = Some(n),
        BatteryConstraint::Exactly(n) => {
            problem.exact_batteries = Some(n.min(problem.candidates.len()))
        }
    }
    Ok(battopt::place_batteries(&problem, book)?)
}

/// One remedy column in the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub capex_eur: f64,
    pub annual_eur: f64,
    /// placed batteries, or reinforcement actions
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ComparisonCell {
    fn failed(message: String) -> Self {
        ComparisonCell {
            capex_eur: f64::NAN,
            annual_eur: f64::NAN,
            count: 0,
            error: Some(message),
        }
    }
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub penetration: f64,
    pub v_deviation_limit: f64,
    pub reinforcement: ComparisonCell,
    pub battery_unconstrained: ComparisonCell,
    pub battery_fixed_5: ComparisonCell,
    pub battery_fixed_10: ComparisonCell,
    /// per window hour (min, max) bus voltage without remedies
    pub envelope_before: Vec<(f64, f64)>,
    /// the same envelope with the reinforcement plan applied
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_after_reinforcement: Option<Vec<(f64, f64)>>,
    /// the same envelope with the unconstrained battery plan dispatched
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_after_batteries: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| {
            r.reinforcement.ok()
                && r.battery_unconstrained.ok()
                && r.battery_fixed_5.ok()
                && r.battery_fixed_10.ok()
        })
    }

    pub fn failed_cells(&self) -> Vec<String> {
        let mut out = Vec::new();
        for row in &self.rows {
            let label = |name: &str| {
                format!(
                    "penetration {:.0}% / limit {:.0}% / {name}",
                    100.0 * row.penetration,
                    100.0 * row.v_deviation_limit
                )
            };
            for (name, cell) in [
                ("reinforcement", &row.reinforcement),
                ("battery-unconstrained", &row.battery_unconstrained),
                ("battery-5", &row.battery_fixed_5),
                ("battery-10", &row.battery_fixed_10),
            ] {
                if let Some(err) = &cell.error {
                    out.push(format!("{}: {err}", label(name)));
                }
            }
        }
        out
    }

    /// Table V/VI-shaped CSV; costs printed to 0.1 k€.
    pub fn to_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "penetration,v_limit,reinforcement_capex_keur,reinforcement_annual_keur,\
             battery_capex_keur,battery_annual_keur,battery_count,\
             battery5_capex_keur,battery5_annual_keur,\
             battery10_capex_keur,battery10_annual_keur"
        )?;
        for row in &self.rows {
            write!(
                w,
                "{:.2},{:.2}",
                row.penetration, row.v_deviation_limit
            )?;
            for cell in [
                &row.reinforcement,
                &row.battery_unconstrained,
            ] {
                write!(
                    w,
                    ",{},{}",
                    fmt_keur(cell.capex_eur),
                    fmt_keur(cell.annual_eur)
                )?;
            }
            write!(w, ",{}", row.battery_unconstrained.count)?;
            for cell in [&row.battery_fixed_5, &row.battery_fixed_10] {
                write!(
                    w,
                    ",{},{}",
                    fmt_keur(cell.capex_eur),
                    fmt_keur(cell.annual_eur)
                )?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Costs to 0.1 k€, the resolution of the summary tables.
pub fn fmt_keur(eur: f64) -> String {
    if eur.is_nan() {
        return "failed".into();
    }
    format!("{:.1}", eur / 1_000.0)
}

/// Nonlinear (min, max) voltage per hour over the window, with an optional
/// per-hour per-bus injection delta in kW applied.
fn window_envelope(
    grid: &GridNetwork,
    window: &InjectionSeries,
    delta: Option<&[Vec<f64>]>,
) -> Result<Vec<(f64, f64)>, ReportError> {
    let s_base = grid.s_base_kva();
    let q = vec![0.0; grid.buses.len()];
    let mut envelope = Vec::with_capacity(window.n_hours());
    for t in 0..window.n_hours() {
        let mut net = window.net_kw(t);
        if let Some(d) = delta {
            for (a, b) in net.iter_mut().zip(&d[t]) {
                *a += b;
            }
        }
        let p: Vec<f64> = net.iter().map(|x| x / s_base).collect();
        let sol = nonlinear_loadflow::<f64>(grid, &p, &q, 1.0)
            .map_err(|_| ReportError::Diverged { hour: t })?;
        if !sol.converged {
            return Err(ReportError::Diverged { hour: t });
        }
        let lo = sol.v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sol.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        envelope.push((lo, hi));
    }
    Ok(envelope)
}

struct CellOutcome {
    cell: ComparisonCell,
    reinforcement: Option<ReinforcementPlan>,
    batteries: Option<BatteryPlan>,
}

fn reinforcement_cell(bundle: &ScenarioBundle, book: &CostBook) -> CellOutcome {
    match reinforce::reinforce_grid(
        &bundle.grid,
        &bundle.window,
        bundle.limits,
        book,
    ) {
        Ok(plan) => CellOutcome {
            cell: ComparisonCell {
                capex_eur: plan.total_capex,
                annual_eur: plan.annual_cost,
                count: plan.actions.len(),
                error: None,
            },
            reinforcement: Some(plan),
            batteries: None,
        },
        Err(err) => CellOutcome {
            cell: ComparisonCell::failed(err.to_string()),
            reinforcement: None,
            batteries: None,
        },
    }
}

fn battery_cell(
    bundle: &ScenarioBundle,
    constraint: BatteryConstraint,
    allow_curtailment: bool,
    candidate_count: usize,
    book: &CostBook,
) -> CellOutcome {
    match place_with_constraint(
        bundle,
        constraint,
        allow_curtailment,
        candidate_count,
        book,
    ) {
        Ok(plan) => CellOutcome {
            cell: ComparisonCell {
                capex_eur: plan.capex,
                annual_eur: plan.annual_cost,
                count: plan.placements.len(),
                error: None,
            },
            reinforcement: None,
            batteries: Some(plan),
        },
        Err(err) => CellOutcome {
            cell: ComparisonCell::failed(err.to_string()),
            reinforcement: None,
            batteries: None,
        },
    }
}

/// Plans kept alongside the table so emitted JSON can be re-priced.
pub struct ComparisonArtifacts {
    pub report: ComparisonReport,
    pub reinforcements: Vec<Option<ReinforcementPlan>>,
    pub battery_plans: Vec<Option<BatteryPlan>>,
}

/// Run the full remedy matrix for each scenario; assembly is ordered by
/// scenario index, so output is independent of scheduling. With
/// `parallel = true`, scenario rows and the four remedy cells of each row run
/// on their own threads; the sequential mode exists to demonstrate that the
/// output does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    grid: &GridNetwork,
    series: &InjectionSeries,
    scenarios: &[(f64, f64)],
    window_hours: usize,
    allow_curtailment: bool,
    candidate_count: usize,
    parallel: bool,
    book: &CostBook,
) -> Result<ComparisonArtifacts, ReportError> {
    struct RowOutcome {
        row: ComparisonRow,
        reinforcement: Option<ReinforcementPlan>,
        batteries: Option<BatteryPlan>,
    }
    let run_row = |&(penetration, v_limit): &(f64, f64)| -> Result<RowOutcome, ReportError> {
        let scaled = scale_series(series, penetration)?;
        let bundle = bundle_from_series(
            grid,
            &scaled,
            window_hours,
            Limits::symmetric(v_limit),
        )?;
        let battery = |constraint: BatteryConstraint| {
            battery_cell(
                &bundle,
                constraint,
                allow_curtailment,
                candidate_count,
                book,
            )
        };
        let cells: Vec<CellOutcome> = if parallel {
            std::thread::scope(|scope| {
                let handles = vec![
                    scope.spawn(|| reinforcement_cell(&bundle, book)),
                    scope.spawn(|| battery(BatteryConstraint::Unconstrained)),
                    scope.spawn(|| battery(BatteryConstraint::Exactly(5))),
                    scope.spawn(|| battery(BatteryConstraint::Exactly(10))),
                ];
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        } else {
            vec![
                reinforcement_cell(&bundle, book),
                battery(BatteryConstraint::Unconstrained),
                battery(BatteryConstraint::Exactly(5)),
                battery(BatteryConstraint::Exactly(10)),
            ]
        };
        let mut cells = cells.into_iter();
        let reinf = cells.next().unwrap();
        let unc = cells.next().unwrap();
        let five = cells.next().unwrap();
        let ten = cells.next().unwrap();
        let envelope_after_reinforcement = match &reinf.reinforcement {
            Some(plan) => {
                Some(window_envelope(&plan.apply(&bundle.grid), &bundle.window, None)?)
            }
            None => None,
        };
        let envelope_after_batteries = match &unc.batteries {
            Some(plan) => {
                let delta = plan
                    .injection_delta(bundle.grid.buses.len(), bundle.window.n_hours());
                Some(window_envelope(&bundle.grid, &bundle.window, Some(&delta))?)
            }
            None => None,
        };
        Ok(RowOutcome {
            row: ComparisonRow {
                penetration,
                v_deviation_limit: v_limit,
                reinforcement: reinf.cell,
                battery_unconstrained: unc.cell,
                battery_fixed_5: five.cell,
                battery_fixed_10: ten.cell,
                envelope_before: bundle.envelope.clone(),
                envelope_after_reinforcement,
                envelope_after_batteries,
            },
            reinforcement: reinf.reinforcement,
            batteries: unc.batteries,
        })
    };
    let outcomes: Vec<Result<RowOutcome, ReportError>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = scenarios
                .iter()
                .map(|cell| scope.spawn(move || run_row(cell)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    } else {
        scenarios.iter().map(run_row).collect()
    };
    let mut rows = Vec::new();
    let mut reinforcements = Vec::new();
    let mut battery_plans = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        rows.push(outcome.row);
        reinforcements.push(outcome.reinforcement);
        battery_plans.push(outcome.batteries);
    }
    Ok(ComparisonArtifacts {
        report: ComparisonReport { rows },
        reinforcements,
        battery_plans,
    })
}

/// Wide CSV: one row per hour, one voltage column per bus, with the remedy
/// plans (if any) applied before the nonlinear solve.
pub fn emit_voltage_profile(
    bundle: &ScenarioBundle,
    reinforcement: Option<&ReinforcementPlan>,
    batteries: Option<&BatteryPlan>,
    mut w: impl std::io::Write,
) -> Result<(), ReportError> {
    let grid = match reinforcement {
        Some(plan) => plan.apply(&bundle.grid),
        None => bundle.grid.clone(),
    };
    let n = grid.buses.len();
    let hours = bundle.window.n_hours();
    let delta = batteries
        .map(|p| p.injection_delta(n, hours))
        .unwrap_or_else(|| vec![vec![0.0; n]; hours]);
    write!(w, "timestamp")?;
    for bus in 0..n {
        write!(w, ",bus_{bus}")?;
    }
    writeln!(w)?;
    let s_base = grid.s_base_kva();
    let q = vec![0.0; n];
    for t in 0..hours {
        let p: Vec<f64> = bundle
            .window
            .net_kw(t)
            .iter()
            .zip(&delta[t])
            .map(|(a, b)| (a + b) / s_base)
            .collect();
        let sol = nonlinear_loadflow::<f64>(&grid, &p, &q, 1.0)
            .map_err(|_| ReportError::Diverged { hour: t })?;
        if !sol.converged {
            return Err(ReportError::Diverged { hour: t });
        }
        write!(w, "{}", bundle.window.timestamps[t].format("%Y-%m-%dT%H:%MZ"))?;
        for bus in 0..n {
            write!(w, ",{:.6}", sol.v[bus])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn calibrated() -> (GridNetwork, InjectionSeries) {
        fixtures::calibrated_high_pv()
    }

    #[test]
    fn zero_penetration_has_no_violations() {
        let (grid, series) = calibrated();
        let quiet = scale_series(&series, 0.0).unwrap();
        let bundle =
            bundle_from_series(&grid, &quiet, 24, Limits::symmetric(0.05))
                .unwrap();
        assert!(bundle.baseline_violations.is_empty());
        // load-only feeder: voltages at or below nominal everywhere
        for &(_, hi) in &bundle.envelope {
            assert!(hi <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn headline_cost_patterns_on_the_calibrated_fixture() {
        let (grid, series) = calibrated();
        let half = scale_series(&series, 0.5).unwrap();
        let at_5 =
            bundle_from_series(&grid, &half, 24, Limits::symmetric(0.05))
                .unwrap();
        assert!(at_5.baseline_violations.is_empty());
        let at_3 =
            bundle_from_series(&grid, &half, 24, Limits::symmetric(0.03))
                .unwrap();
        assert!(!at_3.baseline_violations.is_empty());
        let high = scale_series(&series, 0.8).unwrap();
        let high_5 =
            bundle_from_series(&grid, &high, 24, Limits::symmetric(0.05))
                .unwrap();
        assert!(!high_5.baseline_violations.is_empty());
    }

    #[test]
    fn compare_emits_ordered_costs_and_round_trips() {
        let (grid, series) = calibrated();
        let book = CostBook::default();
        let artifacts = compare(
            &grid,
            &series,
            &[(0.8, 0.05)],
            12,
            false,
            10,
            true,
            &book,
        )
        .unwrap();
        let report = &artifacts.report;
        assert!(report.all_ok(), "{:?}", report.failed_cells());
        let row = &report.rows[0];
        assert!(row.battery_unconstrained.capex_eur > 0.0);
        assert!(
            row.battery_unconstrained.capex_eur
                <= row.battery_fixed_5.capex_eur + 1e-6
        );
        assert!(
            row.battery_fixed_5.capex_eur
                <= row.battery_fixed_10.capex_eur + 1e-6
        );
        // the headline result: reinforcement is the most expensive option
        assert!(
            row.battery_unconstrained.capex_eur < row.reinforcement.capex_eur
        );
        assert!(
            row.battery_unconstrained.annual_eur < row.reinforcement.annual_eur
        );
        // round-trip: costs re-derivable from the retained plans
        let plan = artifacts.reinforcements[0].as_ref().unwrap();
        let repriced =
            reinforce::reprice(&grid, &grid, &plan.actions, &book).unwrap();
        assert!((plan.total_capex - repriced).abs() < 1e-9);
        let batt = artifacts.battery_plans[0].as_ref().unwrap();
        let recapex: f64 = batt
            .placements
            .iter()
            .map(|p| {
                crate::costbook::battery_capex(
                    p.capacity_kwh,
                    p.power_kw,
                    &book.battery,
                )
                .unwrap()
            })
            .sum();
        assert!((batt.capex - recapex).abs() < 1e-9);
        // both remedies pull the envelope back inside the band
        assert_eq!(row.envelope_before.len(), 12);
        let worst_before =
            row.envelope_before.iter().map(|&(_, hi)| hi).fold(0.0, f64::max);
        assert!(worst_before > 1.05);
        for env in [&row.envelope_after_reinforcement, &row.envelope_after_batteries] {
            let env = env.as_ref().unwrap();
            assert_eq!(env.len(), 12);
            for &(lo, hi) in env {
                assert!(lo >= 0.95 - 2e-3 && hi <= 1.05 + 2e-3, "({lo}, {hi})");
            }
        }
    }

    #[test]
    fn quiet_scenario_yields_zero_row() {
        let (grid, series) = calibrated();
        let book = CostBook::default();
        let artifacts =
            compare(&grid, &series, &[(0.0, 0.05)], 12, false, 10, true, &book)
                .unwrap();
        let row = &artifacts.report.rows[0];
        assert!(row.reinforcement.ok() && row.reinforcement.capex_eur == 0.0);
        assert!(row.battery_unconstrained.capex_eur == 0.0);
        assert_eq!(row.battery_unconstrained.count, 0);
    }

    #[test]
    fn comparison_csv_is_deterministic() {
        let (grid, series) = calibrated();
        let book = CostBook::default();
        let render = |parallel: bool| {
            let artifacts = compare(
                &grid,
                &series,
                &[(0.8, 0.05), (0.0, 0.05)],
                6,
                false,
                10,
                parallel,
                &book,
            )
            .unwrap();
            let mut buf = Vec::new();
            artifacts.report.to_csv(&mut buf).unwrap();
            (buf, serde_json::to_vec(&artifacts.report).unwrap())
        };
        let first = render(true);
        assert_eq!(render(true), first);
        // a single-threaded run produces the same bytes
        assert_eq!(render(false), first);
    }

    #[test]
    fn voltage_profile_shape_and_limits() {
        let (grid, series) = calibrated();
        let high = scale_series(&series, 0.8).unwrap();
        let bundle =
            bundle_from_series(&grid, &high, 12, Limits::symmetric(0.05))
                .unwrap();
        let mut baseline = Vec::new();
        emit_voltage_profile(&bundle, None, None, &mut baseline).unwrap();
        let text = String::from_utf8(baseline.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + bundle.window.n_hours());
        assert_eq!(
            lines[0].split(',').count(),
            1 + grid.buses.len()
        );
        // empty plans reproduce the baseline byte for byte
        let empty_batt = BatteryPlan::empty(bundle.window.n_hours());
        let mut with_empty = Vec::new();
        emit_voltage_profile(&bundle, None, Some(&empty_batt), &mut with_empty)
            .unwrap();
        assert_eq!(baseline, with_empty);
        // post-plan file obeys the limit
        let book = CostBook::default();
        let plan = place_with_constraint(
            &bundle,
            BatteryConstraint::Unconstrained,
            false,
            10,
            &book,
        )
        .unwrap();
        let mut solved = Vec::new();
        emit_voltage_profile(&bundle, None, Some(&plan), &mut solved).unwrap();
        let text = String::from_utf8(solved).unwrap();
        for line in text.lines().skip(1) {
            for v in line.split(',').skip(1) {
                let v: f64 = v.parse().unwrap();
                assert!(v <= bundle.limits.v_max + 2e-3, "{v}");
            }
        }
    }
}
