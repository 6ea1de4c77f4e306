//! Heuristic grid reinforcement: per-branch critical nodes, cheapest cable
//! upgrades along the slack path until voltage and ampacity limits hold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costbook::{self, CostBook};
use crate::grid::{Branch, GridNetwork, InjectionSeries, LineSegment};
use crate::powerflow::{nonlinear_loadflow, screen_limits, VoltageSolution};

/// Hard cap on parallel cables sharing one corridor.
pub const PARALLEL_CAP: u32 = 3;

#[derive(Debug, Error)]
pub enum ReinforceError {
    #[error("load flow diverged at hour {hour}")]
    Diverged { hour: usize },
    #[error("branch rooted at bus {root} cannot be reinforced within the catalog: residual violation {violation:.5} p.u.")]
    InfeasibleBranch { root: usize, violation: f64 },
    #[error("reinforced plan fails verification at hour {hour}")]
    VerificationFailed { hour: usize },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Cost(#[from] crate::costbook::CostError),
}

/// Voltage band in p.u.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
}

impl Limits {
    pub fn symmetric(deviation: f64) -> Self {
        Limits {
            v_min: 1.0 - deviation,
            v_max: 1.0 + deviation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// swap the corridor to `n_parallel` cables of a different type (new route
    /// pricing: one full trench plus the surcharge per extra cable)
    ReplaceWithType,
    /// lay extra cables of the existing type in the existing trench
    /// (surcharge-only pricing per added cable)
    AddParallel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReinforcementAction {
    pub segment: usize,
    pub from: usize,
    pub to: usize,
    pub kind: ActionKind,
    /// resulting line type of the corridor
    #[serde(rename = "type")]
    pub line_type: String,
    /// resulting parallel count
    pub n_parallel: u32,
    pub cost_eur: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReinforcementPlan {
    pub actions: Vec<ReinforcementAction>,
    pub transformer_replaced: bool,
    /// rating after replacement, equal to the original when not replaced
    pub transformer_rating_kva: f64,
    pub total_capex: f64,
    pub annual_cost: f64,
    /// per window hour, the highest bus voltage after reinforcement
    pub final_max_voltage: Vec<f64>,
}

impl ReinforcementPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty() && !self.transformer_replaced
    }

    /// Apply the plan to a copy of the grid.
    pub fn apply(&self, grid: &GridNetwork) -> GridNetwork {
        let mut out = grid.clone();
        for action in &self.actions {
            out.segments[action.segment].line_type = action.line_type.clone();
            out.segments[action.segment].n_parallel = action.n_parallel;
        }
        out.transformer.rating_kva = self.transformer_rating_kva;
        out
    }
}

fn pu_injections(grid: &GridNetwork, kw: &[f64]) -> Vec<f64> {
    let s = grid.s_base_kva();
    kw.iter().map(|x| x / s).collect()
}

fn sweep_window(
    grid: &GridNetwork,
    window: &InjectionSeries,
) -> Result<Vec<VoltageSolution<f64>>, ReinforceError> {
    let n = grid.buses.len();
    let q = vec![0.0; n];
    (0..window.n_hours())
        .map(|t| {
            let p = pu_injections(grid, &window.net_kw(t));
            let sol = nonlinear_loadflow(grid, &p, &q, 1.0)
                .map_err(|_| ReinforceError::Diverged { hour: t })?;
            if !sol.converged {
                return Err(ReinforceError::Diverged { hour: t });
            }
            Ok(sol)
        })
        .collect()
}

/// Worst voltage-limit excess on the branch across the window.
///
/// A non-positive violation means the branch satisfies the limits.
pub fn find_critical_node(
    grid: &GridNetwork,
    branch: &Branch,
    window: &InjectionSeries,
    limits: Limits,
) -> Result<(usize, f64, usize), ReinforceError> {
    let sols = sweep_window(grid, window)?;
    let mut best = (branch.root, f64::NEG_INFINITY, 0);
    for (t, sol) in sols.iter().enumerate() {
        for &bus in &branch.buses {
            let v = sol.v[bus];
            let excess = (v - limits.v_max).max(limits.v_min - v);
            if excess > best.1 {
                best = (bus, excess, t);
            }
        }
    }
    Ok(best)
}

fn effective_r(grid: &GridNetwork, type_name: &str, n_parallel: u32) -> f64 {
    grid.line_type(type_name).map_or(f64::INFINITY, |t| {
        t.r_per_km / n_parallel as f64
    })
}

/// All upgrades of one corridor that strictly lower its effective resistance.
pub fn candidate_actions(
    grid: &GridNetwork,
    segment: usize,
    book: &CostBook,
) -> Vec<ReinforcementAction> {
    let seg = &grid.segments[segment];
    let r_now = effective_r(grid, &seg.line_type, seg.n_parallel);
    let mut out = Vec::new();
    // extra cables of the existing type in the same trench
    if let Some(existing) = grid.line_type(&seg.line_type) {
        for n_added in 1..=PARALLEL_CAP.saturating_sub(seg.n_parallel) {
            let capex = costbook::line_capex(
                existing,
                seg.length_km,
                n_added,
                true,
                &book.grid,
            )
            .expect("positive geometry");
            out.push(ReinforcementAction {
                segment,
                from: seg.from,
                to: seg.to,
                kind: ActionKind::AddParallel,
                line_type: seg.line_type.clone(),
                n_parallel: seg.n_parallel + n_added,
                cost_eur: capex,
            });
        }
    }
    // swap the corridor to a strictly lower-impedance type, laid fresh,
    // keeping the parallel count
    let r_type = grid
        .line_type(&seg.line_type)
        .map_or(f64::INFINITY, |t| t.r_per_km);
    for t in &grid.catalog {
        if t.name == seg.line_type || t.r_per_km >= r_type {
            continue;
        }
        let capex = costbook::line_capex(
            t,
            seg.length_km,
            seg.n_parallel,
            false,
            &book.grid,
        )
        .expect("positive geometry");
        out.push(ReinforcementAction {
            segment,
            from: seg.from,
            to: seg.to,
            kind: ActionKind::ReplaceWithType,
            line_type: t.name.clone(),
            n_parallel: seg.n_parallel,
            cost_eur: capex,
        });
    }
    let _ = r_now;
    out
}

fn apply_action(grid: &mut GridNetwork, action: &ReinforcementAction) {
    let seg = &mut grid.segments[action.segment];
    seg.line_type = action.line_type.clone();
    seg.n_parallel = action.n_parallel;
}

/// Net power in p.u. flowing through each segment's downstream subtree at the
/// given injections, used to estimate the voltage effect of an impedance cut.
fn downstream_p_pu(grid: &GridNetwork, p_pu: &[f64]) -> Vec<f64> {
    let (parent, parent_seg) = grid.tree_parents();
    // process buses leaves-first by repeated relaxation over a BFS order
    let adj = grid.adjacency();
    let slack = grid.slack().id;
    let mut order = Vec::with_capacity(grid.buses.len());
    let mut queue = std::collections::VecDeque::from([slack]);
    let mut seen = vec![false; grid.buses.len()];
    seen[slack] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, _) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    let mut subtree = p_pu.to_vec();
    let mut flow = vec![0.0; grid.segments.len()];
    for &u in order.iter().rev() {
        if let (Some(p), Some(e)) = (parent[u], parent_seg[u]) {
            flow[e] = subtree[u];
            subtree[p] += subtree[u];
        }
    }
    flow
}


/// One action per changed corridor, priced from the original state. The
/// greedy search may touch a corridor several times; the emitted plan only
/// pays for the final configuration.
fn diff_actions(
    original: &GridNetwork,
    updated: &GridNetwork,
    book: &CostBook,
) -> Vec<ReinforcementAction> {
    let mut out = Vec::new();
    for (e, (before, after)) in original
        .segments
        .iter()
        .zip(&updated.segments)
        .enumerate()
    {
        if before.line_type == after.line_type
            && before.n_parallel == after.n_parallel
        {
            continue;
        }
        let (kind, capex) = if before.line_type == after.line_type {
            let t = updated.line_type(&after.line_type).unwrap();
            (
                ActionKind::AddParallel,
                costbook::line_capex(
                    t,
                    after.length_km,
                    after.n_parallel - before.n_parallel,
                    true,
                    &book.grid,
                )
                .expect("positive geometry"),
            )
        } else {
            let t = updated.line_type(&after.line_type).unwrap();
            (
                ActionKind::ReplaceWithType,
                costbook::line_capex(
                    t,
                    after.length_km,
                    after.n_parallel,
                    false,
                    &book.grid,
                )
                .expect("positive geometry"),
            )
        };
        out.push(ReinforcementAction {
            segment: e,
            from: after.from,
            to: after.to,
            kind,
            line_type: after.line_type.clone(),
            n_parallel: after.n_parallel,
            cost_eur: capex,
        });
    }
    out
}

/// Greedy reinforcement of one branch: repeatedly applies the candidate with
/// the best estimated violation reduction per euro along the slack-to-critical
/// path until the branch meets the limits.
pub fn reinforce_branch(
    grid: &GridNetwork,
    branch: &Branch,
    limits: Limits,
    window: &InjectionSeries,
    book: &CostBook,
) -> Result<Vec<ReinforcementAction>, ReinforceError> {
    let mut work = grid.clone();
    let mut banned: Vec<(usize, String, u32)> = Vec::new();
    loop {
        let (bus, violation, hour) =
            find_critical_node(&work, branch, window, limits)?;
        if violation <= 0.0 {
            return Ok(diff_actions(grid, &work, book));
        }
        let path = work.path_to_slack(bus)?;
        let p_pu = pu_injections(&work, &window.net_kw(hour));
        let flow = downstream_p_pu(&work, &p_pu);
        let z_base = work.z_base_ohm();
        // best (reduction / capex); ties: lower capex, then closer to slack
        let mut best: Option<(f64, f64, usize, ReinforcementAction)> = None;
        for (depth, &seg_idx) in path.iter().enumerate() {
            let seg = &work.segments[seg_idx];
            let r_now = effective_r(&work, &seg.line_type, seg.n_parallel);
            for action in candidate_actions(&work, seg_idx, book) {
                let key =
                    (seg_idx, action.line_type.clone(), action.n_parallel);
                if banned.contains(&key) {
                    continue;
                }
                let r_new =
                    effective_r(&work, &action.line_type, action.n_parallel);
                let dr_pu = (r_now - r_new) * seg.length_km / z_base;
                let reduction = dr_pu * flow[seg_idx].abs();
                if reduction <= 0.0 {
                    continue;
                }
                let ratio = reduction / action.cost_eur;
                let better = match &best {
                    None => true,
                    Some((br, bc, bd, _)) => {
                        ratio > *br
                            || (ratio == *br && action.cost_eur < *bc)
                            || (ratio == *br
                                && action.cost_eur == *bc
                                && depth < *bd)
                    }
                };
                if better {
                    best = Some((ratio, action.cost_eur, depth, action));
                }
            }
        }
        let Some((_, _, _, action)) = best else {
            return Err(ReinforceError::InfeasibleBranch {
                root: branch.root,
                violation,
            });
        };
        let mut trial = work.clone();
        apply_action(&mut trial, &action);
        // termination guarantee: the critical violation must strictly drop
        let sol = {
            let p = pu_injections(&trial, &window.net_kw(hour));
            let q = vec![0.0; p.len()];
            nonlinear_loadflow(&trial, &p, &q, 1.0)
                .map_err(|_| ReinforceError::Diverged { hour })?
        };
        let v = sol.v[bus];
        let after = (v - limits.v_max).max(limits.v_min - v);
        if !sol.converged || after >= violation {
            banned.push((action.segment, action.line_type, action.n_parallel));
            continue;
        }
        work = trial;
    }
}

fn worst_ampacity_excess(
    grid: &GridNetwork,
    sols: &[VoltageSolution<f64>],
) -> Option<(usize, f64)> {
    let mut worst: Option<(usize, f64)> = None;
    for sol in sols {
        for (e, &amps) in sol.line_currents.iter().enumerate() {
            let excess = amps - grid.segment_ampacity_a(&grid.segments[e]);
            if excess > 0.0 && worst.is_none_or(|(_, w)| excess > w) {
                worst = Some((e, excess));
            }
        }
    }
    worst
}

/// Full heuristic: reinforce every branch for voltage, then clear ampacity
/// overloads, then replace the transformer if it runs above its rating.
pub fn reinforce_grid(
    grid: &GridNetwork,
    window: &InjectionSeries,
    limits: Limits,
    book: &CostBook,
) -> Result<ReinforcementPlan, ReinforceError> {
    let branches = grid.branches();
    // branches are electrically independent subtrees off the slack, so each
    // is planned against the shared original snapshot
    let results: Vec<Result<Vec<ReinforcementAction>, ReinforceError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = branches
                .iter()
                .map(|branch| {
                    scope.spawn(move || {
                        reinforce_branch(grid, branch, limits, window, book)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
    let mut work = grid.clone();
    for result in results {
        for action in result? {
            apply_action(&mut work, &action);
        }
    }
    // ampacity pass: cheapest candidate that clears the worst overload
    loop {
        let sols = sweep_window(&work, window)?;
        let Some((seg_idx, _)) = worst_ampacity_excess(&work, &sols) else {
            break;
        };
        let max_amps = sols
            .iter()
            .map(|s| s.line_currents[seg_idx])
            .fold(0.0f64, f64::max);
        let fix = candidate_actions(&work, seg_idx, book)
            .into_iter()
            .filter(|a| {
                let t = work.line_type(&a.line_type).unwrap();
                t.ampacity * a.n_parallel as f64 >= max_amps
            })
            .min_by(|a, b| a.cost_eur.total_cmp(&b.cost_eur));
        let Some(action) = fix else {
            return Err(ReinforceError::InfeasibleBranch {
                root: work.segments[seg_idx].to,
                violation: max_amps,
            });
        };
        apply_action(&mut work, &action);
    }
    // transformer: replaced (next larger unit) when loaded above 100 %
    let mut sols = sweep_window(&work, window)?;
    let peak_kva = sols
        .iter()
        .map(|s| s.transformer_kva)
        .fold(0.0f64, f64::max);
    let mut transformer_replaced = false;
    if peak_kva > work.transformer.rating_kva {
        transformer_replaced = true;
        while peak_kva > work.transformer.rating_kva {
            work.transformer.rating_kva *= 2.0;
        }
        sols = sweep_window(&work, window)?;
    }
    let actions = diff_actions(grid, &work, book);
    let total_capex: f64 = actions.iter().map(|a| a.cost_eur).sum::<f64>()
        + if transformer_replaced {
            book.grid.transformer_cost
        } else {
            0.0
        };
    let annual_cost =
        costbook::annualize(total_capex, book.grid.cable_lifetime)?;
    // final verification across the whole window
    for (t, sol) in sols.iter().enumerate() {
        if !screen_limits(&work, sol, limits.v_min, limits.v_max).is_empty() {
            return Err(ReinforceError::VerificationFailed { hour: t });
        }
    }
    let final_max_voltage = sols
        .iter()
        .map(|s| s.v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(ReinforcementPlan {
        actions,
        transformer_replaced,
        transformer_rating_kva: work.transformer.rating_kva,
        total_capex,
        annual_cost,
        final_max_voltage,
    })
}

/// Re-price an action list through the cost book, for cost-attribution checks.
pub fn reprice(
    grid: &GridNetwork,
    original: &GridNetwork,
    actions: &[ReinforcementAction],
    book: &CostBook,
) -> Result<f64, ReinforceError> {
    // track corridor state so consecutive actions on a segment price like the
    // planner saw them
    let mut state: Vec<LineSegment> = original.segments.clone();
    let mut total = 0.0;
    for action in actions {
        let seg = &state[action.segment];
        let t = grid
            .line_type(&action.line_type)
            .ok_or_else(|| crate::grid::GridError::UnknownLineType {
                from: action.from,
                to: action.to,
                name: action.line_type.clone(),
            })?;
        total += match action.kind {
            ActionKind::AddParallel => costbook::line_capex(
                t,
                seg.length_km,
                action.n_parallel - seg.n_parallel,
                true,
                &book.grid,
            )?,
            ActionKind::ReplaceWithType => costbook::line_capex(
                t,
                seg.length_km,
                action.n_parallel,
                false,
                &book.grid,
            )?,
        };
        state[action.segment].line_type = action.line_type.clone();
        state[action.segment].n_parallel = action.n_parallel;
    }
    Ok(total)
}
