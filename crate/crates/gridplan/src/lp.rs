//! Linear programming and binary mixed-integer solving.
//!
//! The LP core is a dense two-phase primal simplex with bounded variables.
//! Feasibility is established with one artificial variable per row, so basic
//! variables never leave their bounds and both phases share the same pivot
//! loop. Pivot selection is Dantzig's rule with a switch to Bland's rule
//! after a run of degenerate steps; all tie-breaks are by lowest index, which
//! makes results deterministic.
//!
//! Integer support is binary-only branch and bound: best-first on the LP
//! bound, branching on the most fractional binary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("variable {0} has lower bound above upper bound")]
    BadBounds(usize),
    #[error("integer variable {0} must have bounds within [0, 1]")]
    NonBinaryInteger(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Row<S> {
    /// sparse coefficients (variable index, value)
    pub coeffs: Vec<(usize, S)>,
    pub sense: Sense,
    pub rhs: S,
}

/// Minimization problem with per-variable bounds (infinities allowed).
#[derive(Debug, Clone)]
pub struct LinearProgram<S> {
    pub objective: Vec<S>,
    pub rows: Vec<Row<S>>,
    pub bounds: Vec<(S, S)>,
}

impl<S: Scalar> LinearProgram<S> {
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![S::zero(); n],
            rows: Vec::new(),
            bounds: vec![(S::zero(), S::infinity()); n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, S)>, sense: Sense, rhs: S) {
        self.rows.push(Row { coeffs, sense, rhs });
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        if self.bounds.len() != n {
            return Err(LpError::Dimensions(format!(
                "{} bounds for {} variables",
                self.bounds.len(),
                n
            )));
        }
        for (j, &(l, u)) in self.bounds.iter().enumerate() {
            if l > u {
                return Err(LpError::BadBounds(j));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, _) in &row.coeffs {
                if j >= n {
                    return Err(LpError::Dimensions(format!(
                        "row {i} references variable {j} of {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text dump (objective, rows, bounds) for external cross-checks.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "minimize");
        let terms: Vec<String> = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != S::zero())
            .map(|(j, c)| format!("{c} x{j}"))
            .collect();
        let _ = writeln!(out, "  {}", terms.join(" + "));
        let _ = writeln!(out, "subject to");
        for row in &self.rows {
            let terms: Vec<String> = row
                .coeffs
                .iter()
                .map(|(j, c)| format!("{c} x{j}"))
                .collect();
            let op = match row.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            let _ = writeln!(out, "  {} {} {}", terms.join(" + "), op, row.rhs);
        }
        let _ = writeln!(out, "bounds");
        for (j, (l, u)) in self.bounds.iter().enumerate() {
            let _ = writeln!(out, "  {l} <= x{j} <= {u}");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MixedIntegerProgram<S> {
    pub base: LinearProgram<S>,
    /// indices of binary variables
    pub integers: Vec<usize>,
}

impl<S: Scalar> MixedIntegerProgram<S> {
    pub fn validate(&self) -> Result<(), LpError> {
        self.base.validate()?;
        for &j in &self.integers {
            if j >= self.base.n_vars() {
                return Err(LpError::Dimensions(format!("integer variable {j}")));
            }
            let (l, u) = self.base.bounds[j];
            if l < S::zero() || u > S::one() {
                return Err(LpError::NonBinaryInteger(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NodeLimit,
}

#[derive(Debug, Clone)]
pub struct SolveResult<S> {
    pub status: Status,
    pub x: Vec<S>,
    pub objective: S,
    /// relative MIP gap; zero for LP solves
    pub gap: S,
}

/// Named tolerances; all solver constants are surfaced here.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// primal feasibility (scaled)
    pub feasibility: f64,
    /// reduced-cost optimality
    pub optimality: f64,
    /// minimum usable pivot magnitude
    pub pivot: f64,
    /// pivot cap per LP solve
    pub max_iterations: usize,
    /// degenerate steps before switching to Bland's rule
    pub degeneracy_switch: usize,
    /// integrality tolerance for branch and bound
    pub integrality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            feasibility: 1e-7,
            optimality: 1e-7,
            pivot: 1e-9,
            max_iterations: 50_000,
            degeneracy_switch: 40,
            integrality: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    /// free variable resting at zero
    Free,
}

struct Simplex<S> {
    m: usize,
    /// structural count
    n: usize,
    /// n structural + m slack + m artificial
    total: usize,
    /// dense tableau, m x total, kept as B^-1 A by pivoting
    t: Vec<Vec<S>>,
    /// B^-1 b, kept in lockstep with the tableau so basic values can be
    /// recomputed from it instead of drifting through incremental updates
    rhs: Vec<S>,
    lower: Vec<S>,
    upper: Vec<S>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    x_basic: Vec<S>,
    tol: Tolerances,
}

impl<S: Scalar> Simplex<S> {
    fn new(lp: &LinearProgram<S>, tol: Tolerances) -> Self {
        let n = lp.n_vars();
        let m = lp.rows.len();
        let total = n + 2 * m;
        let mut t = vec![vec![S::zero(); total]; m];
        let mut lower = vec![S::zero(); total];
        let mut upper = vec![S::zero(); total];
        for j in 0..n {
            lower[j] = lp.bounds[j].0;
            upper[j] = lp.bounds[j].1;
        }
        for (i, row) in lp.rows.iter().enumerate() {
            for &(j, c) in &row.coeffs {
                t[i][j] += c;
            }
            t[i][n + i] = S::one();
            let (l, u) = match row.sense {
                Sense::Le => (S::zero(), S::infinity()),
                Sense::Ge => (S::neg_infinity(), S::zero()),
                Sense::Eq => (S::zero(), S::zero()),
            };
            lower[n + i] = l;
            upper[n + i] = u;
            // artificial bounds set below once the sign is known
        }
        // nonbasic starting point: nearest finite bound, else free at zero
        let mut state = vec![VarState::AtLower; total];
        for j in 0..n + m {
            state[j] = if lower[j].is_finite() {
                VarState::AtLower
            } else if upper[j].is_finite() {
                VarState::AtUpper
            } else {
                VarState::Free
            };
        }
        let nb_value = |state: &VarState, l: S, u: S| match state {
            VarState::AtLower => l,
            VarState::AtUpper => u,
            _ => S::zero(),
        };
        let mut basis = vec![0; m];
        let mut x_basic = vec![S::zero(); m];
        let mut rhs = vec![S::zero(); m];
        for i in 0..m {
            let mut residual = lp.rows[i].rhs;
            for j in 0..n + m {
                let v = nb_value(&state[j], lower[j], upper[j]);
                if v != S::zero() {
                    residual -= t[i][j] * v;
                }
            }
            let a = n + m + i;
            // keep the artificial's basis column at +1: flip the whole row
            // when the residual is negative so the tableau stays B^-1 A
            if residual < S::zero() {
                for coeff in t[i][..n + m].iter_mut() {
                    *coeff = -*coeff;
                }
                rhs[i] = -lp.rows[i].rhs;
            } else {
                rhs[i] = lp.rows[i].rhs;
            }
            t[i][a] = S::one();
            lower[a] = S::zero();
            upper[a] = S::infinity();
            state[a] = VarState::Basic(i);
            basis[i] = a;
            x_basic[i] = residual.abs();
        }
        Simplex {
            m,
            n,
            total,
            t,
            rhs,
            lower,
            upper,
            state,
            basis,
            x_basic,
            tol,
        }
    }

    /// Recompute basic values from B^-1 b and the nonbasic bound values,
    /// discarding accumulated incremental-update error.
    fn resync_basics(&mut self) {
        for i in 0..self.m {
            let mut v = self.rhs[i];
            for j in 0..self.total {
                let xj = match self.state[j] {
                    VarState::AtLower => self.lower[j],
                    VarState::AtUpper => self.upper[j],
                    _ => continue,
                };
                if xj != S::zero() {
                    v -= self.t[i][j] * xj;
                }
            }
            self.x_basic[i] = v;
        }
    }

    /// Step length at which row `i` blocks the entering variable `q` moving
    /// in direction `sigma`, with the blocking bound relaxed by `relax`.
    fn ratio_limit(&self, i: usize, q: usize, sigma: S, relax: S) -> S {
        let a = self.t[i][q];
        if a.abs() <= S::of(self.tol.pivot) {
            return S::infinity();
        }
        let rate = -sigma * a; // d x_B[i] / d t
        let xb = self.x_basic[i];
        let jb = self.basis[i];
        let limit = if rate > S::zero() {
            if self.upper[jb].is_finite() {
                (self.upper[jb] + relax - xb) / rate
            } else {
                S::infinity()
            }
        } else if self.lower[jb].is_finite() {
            (self.lower[jb] - relax - xb) / rate
        } else {
            S::infinity()
        };
        limit.max(S::zero())
    }

    fn nonbasic_value(&self, j: usize) -> S {
        match self.state[j] {
            VarState::AtLower => self.lower[j],
            VarState::AtUpper => self.upper[j],
            VarState::Free => S::zero(),
            VarState::Basic(i) => self.x_basic[i],
        }
    }

    fn reduced_costs(&self, cost: &[S]) -> Vec<S> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != S::zero() {
                let row = &self.t[i];
                for j in 0..self.total {
                    d[j] -= cb * row[j];
                }
            }
        }
        d
    }

    /// Run the pivot loop for the given cost vector. Returns the status and
    /// the number of iterations consumed.
    fn optimize(&mut self, cost: &[S], iter_budget: &mut usize) -> Status {
        let opt_tol = S::of(self.tol.optimality);
        let pivot_tol = S::of(self.tol.pivot);
        let feas_tol = S::of(self.tol.feasibility);
        let mut d = self.reduced_costs(cost);
        let mut degenerate_run = 0usize;
        let mut since_refresh = 0usize;
        loop {
            if *iter_budget == 0 {
                return Status::IterationLimit;
            }
            // periodic refresh: drop the error the incremental updates of
            // x_basic and the reduced costs accumulate on long solves
            if since_refresh >= 64 {
                self.resync_basics();
                d = self.reduced_costs(cost);
                since_refresh = 0;
            }
            let bland = degenerate_run > self.tol.degeneracy_switch;
            // entering variable
            let mut entering: Option<(usize, S, bool)> = None; // (var, |d|, increase)
            for j in 0..self.total {
                let (eligible, increase) = match self.state[j] {
                    VarState::Basic(_) => (false, false),
                    VarState::AtLower => (self.lower[j] < self.upper[j] && d[j] < -opt_tol, true),
                    VarState::AtUpper => (self.lower[j] < self.upper[j] && d[j] > opt_tol, false),
                    VarState::Free => (d[j].abs() > opt_tol, d[j] < S::zero()),
                };
                if !eligible {
                    continue;
                }
                if bland {
                    entering = Some((j, d[j].abs(), increase));
                    break;
                }
                match entering {
                    Some((_, best, _)) if d[j].abs() <= best => {}
                    _ => entering = Some((j, d[j].abs(), increase)),
                }
            }
            let Some((q, _, increase)) = entering else {
                return Status::Optimal;
            };
            let sigma = if increase { S::one() } else { -S::one() };
            // two-pass ratio test. Pass 1 finds the shortest step with the
            // bounds relaxed by the feasibility tolerance; pass 2 picks, among
            // the rows whose exact limit fits in that step, the one with the
            // largest pivot. Tiny pivots are what corrupt a dense tableau, so
            // trading a tolerance-sized bound overshoot for a big pivot keeps
            // the solve stable; ties go to the lowest basis index for
            // determinism.
            let flip = self.upper[q] - self.lower[q]; // bound flip distance
            let mut t_relaxed = if flip.is_finite() { flip } else { S::infinity() };
            for i in 0..self.m {
                t_relaxed = t_relaxed.min(self.ratio_limit(i, q, sigma, feas_tol));
            }
            if !t_relaxed.is_finite() {
                return Status::Unbounded;
            }
            let mut leave: Option<usize> = None;
            let mut t_best = if flip.is_finite() && flip <= t_relaxed {
                flip
            } else {
                S::infinity()
            };
            let mut best_pivot = S::zero();
            for i in 0..self.m {
                let limit = self.ratio_limit(i, q, sigma, S::zero());
                if limit > t_relaxed {
                    continue;
                }
                let a = self.t[i][q].abs();
                let better = match leave {
                    None => true,
                    Some(r) => {
                        a > best_pivot
                            || (a == best_pivot && self.basis[i] < self.basis[r])
                    }
                };
                if better {
                    leave = Some(i);
                    best_pivot = a;
                    t_best = limit;
                }
            }
            if leave.is_none() && !t_best.is_finite() {
                // every blocking row needed the relaxation: fall back to the
                // strictly shortest step
                for i in 0..self.m {
                    let limit = self.ratio_limit(i, q, sigma, S::zero());
                    let better = match leave {
                        None => limit < t_best,
                        Some(r) => {
                            limit < t_best
                                || (limit == t_best
                                    && self.basis[i] < self.basis[r])
                        }
                    };
                    if better {
                        t_best = limit;
                        leave = Some(i);
                    }
                }
            }
            if flip.is_finite() && flip < t_best {
                // the entering variable reaches its other bound first
                leave = None;
                t_best = flip;
            }
            if !t_best.is_finite() {
                return Status::Unbounded;
            }
            *iter_budget -= 1;
            since_refresh += 1;
            if t_best <= S::of(1e-12) {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            match leave {
                None => {
                    // bound flip of the entering variable
                    for i in 0..self.m {
                        let a = self.t[i][q];
                        if a.abs() > pivot_tol {
                            self.x_basic[i] = self.x_basic[i] - sigma * a * t_best;
                        }
                    }
                    self.state[q] = if increase {
                        VarState::AtUpper
                    } else {
                        VarState::AtLower
                    };
                }
                Some(r) => {
                    // update basic values, then pivot on (r, q)
                    let entering_value = self.nonbasic_value(q) + sigma * t_best;
                    for i in 0..self.m {
                        if i == r {
                            continue;
                        }
                        let a = self.t[i][q];
                        if a.abs() > pivot_tol {
                            self.x_basic[i] = self.x_basic[i] - sigma * a * t_best;
                        }
                    }
                    let leaving = self.basis[r];
                    let rate = -sigma * self.t[r][q];
                    self.state[leaving] = if rate > S::zero() {
                        VarState::AtUpper
                    } else {
                        VarState::AtLower
                    };
                    // clamp to the exact bound to avoid drift
                    let piv = self.t[r][q];
                    let inv = S::one() / piv;
                    for j in 0..self.total {
                        self.t[r][j] *= inv;
                    }
                    self.rhs[r] *= inv;
                    let rhs_r = self.rhs[r];
                    for i in 0..self.m {
                        if i == r {
                            continue;
                        }
                        let f = self.t[i][q];
                        if f.abs() > S::zero() {
                            for j in 0..self.total {
                                let delta = f * self.t[r][j];
                                self.t[i][j] -= delta;
                            }
                            self.rhs[i] -= f * rhs_r;
                        }
                    }
                    let f = d[q];
                    if f != S::zero() {
                        for j in 0..self.total {
                            d[j] -= f * self.t[r][j];
                        }
                    }
                    self.basis[r] = q;
                    self.state[q] = VarState::Basic(r);
                    self.x_basic[r] = entering_value;
                }
            }
        }
    }

    fn solution(&self) -> Vec<S> {
        let mut x = vec![S::zero(); self.n];
        for (j, item) in x.iter_mut().enumerate() {
            *item = self.nonbasic_value(j);
        }
        x
    }
}

/// Solve a linear program; status reports infeasibility, unboundedness or the
/// iteration cap.
pub fn solve_lp<S: Scalar>(lp: &LinearProgram<S>, tol: &Tolerances) -> Result<SolveResult<S>, LpError> {
    lp.validate()?;
    let mut sx = Simplex::new(lp, *tol);
    let mut budget = tol.max_iterations;
    // phase 1: drive the artificials to zero
    let mut cost1 = vec![S::zero(); sx.total];
    for j in sx.n + sx.m..sx.total {
        cost1[j] = S::one();
    }
    let status = sx.optimize(&cost1, &mut budget);
    if status == Status::IterationLimit {
        return Ok(SolveResult {
            status,
            x: sx.solution(),
            objective: S::nan(),
            gap: S::zero(),
        });
    }
    sx.resync_basics();
    let infeasibility: S = (0..sx.m)
        .filter(|&i| sx.basis[i] >= sx.n + sx.m)
        .map(|i| sx.x_basic[i])
        .sum();
    if infeasibility > S::of(tol.feasibility) {
        return Ok(SolveResult {
            status: Status::Infeasible,
            x: sx.solution(),
            objective: S::nan(),
            gap: S::zero(),
        });
    }
    // lock artificials at zero for phase 2
    for j in sx.n + sx.m..sx.total {
        sx.upper[j] = S::zero();
        if !matches!(sx.state[j], VarState::Basic(_)) {
            sx.state[j] = VarState::AtLower;
        }
    }
    let mut cost2 = vec![S::zero(); sx.total];
    cost2[..sx.n].copy_from_slice(&lp.objective);
    let status = sx.optimize(&cost2, &mut budget);
    sx.resync_basics();
    let x = sx.solution();
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| *c * *v)
        .sum();
    Ok(SolveResult {
        status: match status {
            Status::Optimal => Status::Optimal,
            other => other,
        },
        x,
        objective,
        gap: S::zero(),
    })
}

/// Branch and bound over binary variables, best-first on the LP bound.
pub fn solve_mip<S: Scalar>(
    mip: &MixedIntegerProgram<S>,
    gap_tolerance: f64,
    node_limit: usize,
    tol: &Tolerances,
) -> Result<SolveResult<S>, LpError> {
    mip.validate()?;
    struct Node<S> {
        bound: S,
        seq: usize,
        fixes: Vec<(usize, bool)>,
        x: Vec<S>,
    }
    let solve_with = |fixes: &[(usize, bool)]| -> Result<SolveResult<S>, LpError> {
        let mut lp = mip.base.clone();
        for &(j, one) in fixes {
            lp.bounds[j] = if one {
                (S::one(), S::one())
            } else {
                (S::zero(), S::zero())
            };
        }
        solve_lp(&lp, tol)
    };
    let int_tol = S::of(tol.integrality);
    let frac = |x: &[S]| -> Option<usize> {
        // most fractional binary, ties by lowest index
        let mut best: Option<(usize, S)> = None;
        for &j in &mip.integers {
            let f = (x[j] - x[j].round()).abs();
            if f > int_tol {
                let score = (x[j] - S::of(0.5)).abs();
                match best {
                    Some((_, s)) if s <= score => {}
                    _ => best = Some((j, score)),
                }
            }
        }
        best.map(|(j, _)| j)
    };
    let root = solve_with(&[])?;
    match root.status {
        Status::Infeasible | Status::Unbounded | Status::IterationLimit => {
            return Ok(root);
        }
        Status::Optimal | Status::NodeLimit => {}
    }
    let mut incumbent: Option<(S, Vec<S>)> = None;
    // rounding probes on the root relaxation: fixing the binaries to a
    // rounded pattern and re-solving often yields a feasible point whose
    // objective prunes most of the tree before branching starts
    if frac(&root.x).is_some() {
        let probes: [&dyn Fn(S) -> bool; 2] = [
            &|v: S| v >= S::of(0.5),
            &|v: S| v > int_tol,
        ];
        for probe in probes {
            let fixes: Vec<(usize, bool)> = mip
                .integers
                .iter()
                .map(|&j| (j, probe(root.x[j])))
                .collect();
            let probe_result = solve_with(&fixes)?;
            if probe_result.status == Status::Optimal {
                let better = incumbent
                    .as_ref()
                    .map_or(true, |(obj, _)| probe_result.objective < *obj);
                if better {
                    incumbent = Some((probe_result.objective, probe_result.x));
                }
            }
        }
    }
    let mut heap: Vec<Node<S>> = vec![Node {
        bound: root.objective,
        seq: 0,
        fixes: Vec::new(),
        x: root.x,
    }];
    let mut seq = 1usize;
    let mut nodes = 0usize;
    let mut best_bound;
    while let Some(pos) = heap
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.bound
                .partial_cmp(&b.bound)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.seq.cmp(&b.seq))
        })
        .map(|(i, _)| i)
    {
        let node = heap.swap_remove(pos);
        best_bound = node.bound;
        if let Some((inc_obj, _)) = &incumbent {
            let scale = S::one().max(inc_obj.abs());
            if node.bound >= *inc_obj - S::of(gap_tolerance) * scale {
                break; // best-first: remaining nodes cannot improve
            }
        }
        nodes += 1;
        if nodes > node_limit {
            let (obj, x) = incumbent.unwrap_or((S::nan(), Vec::new()));
            let scale = S::one().max(obj.abs());
            return Ok(SolveResult {
                status: Status::NodeLimit,
                gap: ((obj - best_bound) / scale).max(S::zero()),
                x,
                objective: obj,
            });
        }
        match frac(&node.x) {
            None => {
                // integral: candidate incumbent
                let better = incumbent
                    .as_ref()
                    .map_or(true, |(obj, _)| node.bound < *obj);
                if better {
                    incumbent = Some((node.bound, node.x));
                }
            }
            Some(j) => {
                for one in [false, true] {
                    let mut fixes = node.fixes.clone();
                    fixes.push((j, one));
                    let child = solve_with(&fixes)?;
                    if child.status == Status::Optimal {
                        let keep = incumbent.as_ref().map_or(true, |(obj, _)| {
                            let scale = S::one().max(obj.abs());
                            child.objective < *obj - S::of(gap_tolerance) * scale
                        });
                        if keep {
                            heap.push(Node {
                                bound: child.objective,
                                seq,
                                fixes,
                                x: child.x,
                            });
                            seq += 1;
                        }
                    }
                }
            }
        }
    }
    match incumbent {
        Some((obj, x)) => Ok(SolveResult {
            status: Status::Optimal,
            x,
            objective: obj,
            gap: S::zero(),
        }),
        None => Ok(SolveResult {
            status: Status::Infeasible,
            x: Vec::new(),
            objective: S::nan(),
            gap: S::zero(),
        }),
    }
}
