//! Load flow on radial grids.
//!
//! Two routes are provided: a nonlinear backward/forward sweep used as the
//! verification oracle, and a linearized sensitivity model (path-resistance
//! sums) used inside the optimizers. The transformer is a series impedance
//! between the stiff slack bus and the rest of the feeder tree, realized as a
//! virtual internal node so the slack voltage stays at its setpoint.

use num_complex::Complex;
use thiserror::Error;

use crate::grid::GridNetwork;
use crate::scalar::Scalar;

/// Mismatch tolerance for the sweep, in p.u. power.
pub const SWEEP_TOLERANCE: f64 = 1e-8;
/// Iteration cap for the sweep.
pub const SWEEP_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("injection vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("base load flow did not converge after {0} iterations")]
    BaseSolveDiverged(usize),
}

/// Converged state of a backward/forward sweep.
#[derive(Debug, Clone)]
pub struct VoltageSolution<S> {
    /// Voltage magnitude per bus, p.u.
    pub v: Vec<S>,
    /// Current magnitude per segment, amperes.
    pub line_currents: Vec<S>,
    /// Total series losses, kW.
    pub losses_kw: S,
    /// Apparent power through the transformer, kVA.
    pub transformer_kva: S,
    /// Active power flowing from the slack into the feeders, kW (negative
    /// when the grid exports).
    pub slack_injection_kw: S,
    pub converged: bool,
    pub iterations: usize,
}

/// Internal radial tree in per-unit, with the transformer as a virtual edge.
struct PuTree<S> {
    /// real buses 0..n, virtual LV node = n
    n_real: usize,
    root: usize,
    parent: Vec<Option<usize>>,
    parent_z: Vec<Complex<S>>,
    /// original segment index behind each node's parent edge (None for trafo)
    parent_seg: Vec<Option<usize>>,
    /// nodes in BFS order from the root
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl<S: Scalar> PuTree<S> {
    fn build(grid: &GridNetwork) -> Self {
        let n = grid.buses.len();
        let slack = grid.slack().id;
        let z_base = grid.z_base_ohm();
        let virt = n;
        let (parent_bus, parent_seg_idx) = grid.tree_parents();
        let mut parent = vec![None; n + 1];
        let mut parent_z = vec![Complex::new(S::zero(), S::zero()); n + 1];
        let mut parent_seg = vec![None; n + 1];
        // transformer edge: slack -> virtual LV node, modeled as leakage reactance
        parent[virt] = Some(slack);
        parent_z[virt] = Complex::new(
            S::zero(),
            S::of(grid.transformer.impedance_ohm / z_base),
        );
        for b in 0..n {
            if let Some(p) = parent_bus[b] {
                let e = parent_seg_idx[b].expect("parent implies segment");
                let seg = &grid.segments[e];
                parent[b] = Some(if p == slack { virt } else { p });
                parent_z[b] = Complex::new(
                    S::of(grid.segment_r_ohm(seg) / z_base),
                    S::of(grid.segment_x_ohm(seg) / z_base),
                );
                parent_seg[b] = Some(e);
            }
        }
        // BFS order from the slack over the internal tree
        let mut children = vec![Vec::new(); n + 1];
        for u in 0..=n {
            if let Some(p) = parent[u] {
                children[p].push(u);
            }
        }
        let mut order = Vec::with_capacity(n + 1);
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(slack);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &c in &children[u] {
                queue.push_back(c);
            }
        }
        PuTree {
            n_real: n,
            root: slack,
            parent,
            parent_z,
            parent_seg,
            order,
            children,
        }
    }
}

/// Backward/forward sweep with constant-power injections.
///
/// `p_pu`/`q_pu` are per-bus net injections in p.u. (generation positive).
/// Divergence is reported through the `converged` flag, not an error.
pub fn nonlinear_loadflow<S: Scalar>(
    grid: &GridNetwork,
    p_pu: &[S],
    q_pu: &[S],
    slack_v: S,
) -> Result<VoltageSolution<S>, PfError> {
    let n = grid.buses.len();
    if p_pu.len() != n || q_pu.len() != n {
        return Err(PfError::DimensionMismatch {
            got: p_pu.len().min(q_pu.len()),
            expected: n,
        });
    }
    let tree = PuTree::<S>::build(grid);
    let n_nodes = n + 1;
    let zero = Complex::new(S::zero(), S::zero());
    // demand = -injection; the virtual node and the slack carry none
    let mut demand = vec![zero; n_nodes];
    for b in 0..n {
        if b != tree.root {
            demand[b] = Complex::new(-p_pu[b], -q_pu[b]);
        }
    }
    let mut v = vec![Complex::new(slack_v, S::zero()); n_nodes];
    let mut branch_current = vec![zero; n_nodes]; // current on edge parent(u)->u
    let tol = S::of(SWEEP_TOLERANCE);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=SWEEP_MAX_ITERATIONS {
        iterations = it;
        // backward: accumulate demand currents from the leaves up
        for c in branch_current.iter_mut() {
            *c = zero;
        }
        for &u in tree.order.iter().rev() {
            if u == tree.root {
                continue;
            }
            let own = (demand[u] / v[u]).conj();
            branch_current[u] = branch_current[u] + own;
            let p = tree.parent[u].expect("non-root has parent");
            if p != tree.root {
                let add = branch_current[u];
                branch_current[p] = branch_current[p] + add;
            }
        }
        // forward: update voltages from the root down
        let mut max_dv = S::zero();
        for &u in tree.order.iter() {
            if u == tree.root {
                continue;
            }
            let p = tree.parent[u].expect("non-root has parent");
            let new_v = v[p] - tree.parent_z[u] * branch_current[u];
            let dv = (new_v - v[u]).norm();
            if dv > max_dv {
                max_dv = dv;
            }
            v[u] = new_v;
        }
        // power mismatch: what the branch currents actually deliver vs demand
        let mut mismatch = S::zero();
        for &u in tree.order.iter() {
            if u == tree.root {
                continue;
            }
            let mut i_net = branch_current[u];
            for &c in &tree.children[u] {
                i_net = i_net - branch_current[c];
            }
            let s_delivered = v[u] * i_net.conj();
            let m = (s_delivered - demand[u]).norm();
            if m > mismatch {
                mismatch = m;
            }
        }
        if !mismatch.is_finite() || !max_dv.is_finite() {
            break;
        }
        if mismatch < tol {
            converged = true;
            break;
        }
    }
    // losses and segment currents
    let i_base = S::of(grid.i_base_a());
    let s_base = S::of(grid.s_base_kva());
    let mut losses = S::zero();
    let mut line_currents = vec![S::zero(); grid.segments.len()];
    for u in 0..n_nodes {
        if u == tree.root || tree.parent[u].is_none() {
            continue;
        }
        let j = branch_current[u];
        losses += j.norm_sqr() * tree.parent_z[u].re;
        if let Some(e) = tree.parent_seg[u] {
            line_currents[e] = j.norm() * i_base;
        }
    }
    let virt = tree.n_real;
    let trafo_flow = v[tree.root] * branch_current[virt].conj();
    Ok(VoltageSolution {
        v: v[..n].iter().map(|c| c.norm()).collect(),
        line_currents,
        losses_kw: losses * s_base,
        transformer_kva: trafo_flow.norm() * s_base,
        slack_injection_kw: trafo_flow.re * s_base,
        converged,
        iterations,
    })
}

/// Linearized voltage model: v = v0 + S_p (p - p_op) + S_q (q - q_op).
#[derive(Debug, Clone)]
pub struct SensitivityModel<S> {
    /// dv/dp over non-slack buses, p.u./p.u.
    pub s_p: Vec<Vec<S>>,
    /// dv/dq over non-slack buses
    pub s_q: Vec<Vec<S>>,
    /// base voltage per bus (all buses), from the nonlinear solve
    pub v0: Vec<S>,
    pub p_op: Vec<S>,
    pub q_op: Vec<S>,
    /// non-slack bus ids in matrix order
    pub index: Vec<usize>,
    pub slack: usize,
}

impl<S: Scalar> SensitivityModel<S> {
    /// Row/column position of a bus in the matrices, if not the slack.
    pub fn pos(&self, bus: usize) -> Option<usize> {
        self.index.iter().position(|&b| b == bus)
    }
}

/// Build the sensitivity model around an operating point.
///
/// Entry (a, b) is the sum of segment resistances (reactances for `s_q`) on
/// the common slack path of buses a and b, divided by the squared slack
/// setpoint. The base voltage comes from a nonlinear solve at the operating
/// point.
pub fn build_sensitivity<S: Scalar>(
    grid: &GridNetwork,
    p_op: &[S],
    q_op: &[S],
    slack_v: S,
) -> Result<SensitivityModel<S>, PfError> {
    let base = nonlinear_loadflow(grid, p_op, q_op, slack_v)?;
    if !base.converged {
        return Err(PfError::BaseSolveDiverged(base.iterations));
    }
    let n = grid.buses.len();
    let slack = grid.slack().id;
    let z_base = grid.z_base_ohm();
    let (parent, parent_seg) = grid.tree_parents();
    // cumulative series impedance from the slack down to each bus, p.u.
    // (includes the transformer edge, common to every path)
    let trafo_x = grid.transformer.impedance_ohm / z_base;
    let mut r_cum = vec![0.0f64; n];
    let mut x_cum = vec![0.0f64; n];
    let mut depth = vec![0usize; n];
    // process in BFS order to have parents ready
    let mut order = vec![slack];
    let mut i = 0;
    while i < order.len() {
        let u = order[i];
        i += 1;
        for b in 0..n {
            if parent[b] == Some(u) {
                let e = parent_seg[b].expect("parent implies segment");
                let seg = &grid.segments[e];
                r_cum[b] = r_cum[u] + grid.segment_r_ohm(seg) / z_base;
                let extra_x = if u == slack { trafo_x } else { 0.0 };
                x_cum[b] = x_cum[u] + grid.segment_x_ohm(seg) / z_base + extra_x;
                depth[b] = depth[u] + 1;
                order.push(b);
            }
        }
    }
    let index: Vec<usize> = (0..n).filter(|&b| b != slack).collect();
    let m = index.len();
    let v2 = slack_v * slack_v;
    let lca = |a: usize, b: usize| -> usize {
        let (mut a, mut b) = (a, b);
        while depth[a] > depth[b] {
            a = parent[a].unwrap();
        }
        while depth[b] > depth[a] {
            b = parent[b].unwrap();
        }
        while a != b {
            a = parent[a].unwrap();
            b = parent[b].unwrap();
        }
        a
    };
    let mut s_p = vec![vec![S::zero(); m]; m];
    let mut s_q = vec![vec![S::zero(); m]; m];
    for (ia, &a) in index.iter().enumerate() {
        for (ib, &b) in index.iter().enumerate().skip(ia) {
            let k = lca(a, b);
            let sp = S::of(r_cum[k]) / v2;
            // the transformer edge is on every slack path, so two non-slack
            // buses always share at least its reactance
            let common_x = if k == slack { trafo_x } else { x_cum[k] };
            let sq = S::of(common_x) / v2;
            s_p[ia][ib] = sp;
            s_p[ib][ia] = sp;
            s_q[ia][ib] = sq;
            s_q[ib][ia] = sq;
        }
    }
    Ok(SensitivityModel {
        s_p,
        s_q,
        v0: base.v,
        p_op: p_op.to_vec(),
        q_op: q_op.to_vec(),
        index,
        slack,
    })
}

/// Affine voltage prediction for full-length injection vectors.
pub fn linear_voltages<S: Scalar>(
    model: &SensitivityModel<S>,
    p_pu: &[S],
    q_pu: &[S],
) -> Result<Vec<S>, PfError> {
    let n = model.v0.len();
    if p_pu.len() != n || q_pu.len() != n {
        return Err(PfError::DimensionMismatch {
            got: p_pu.len().min(q_pu.len()),
            expected: n,
        });
    }
    let mut v = model.v0.clone();
    for (ia, &a) in model.index.iter().enumerate() {
        let mut dv = S::zero();
        for (ib, &b) in model.index.iter().enumerate() {
            dv += model.s_p[ia][ib] * (p_pu[b] - model.p_op[b])
                + model.s_q[ia][ib] * (q_pu[b] - model.q_op[b]);
        }
        v[a] += dv;
    }
    Ok(v)
}

/// Voltage, ampacity and transformer limit screening.
#[derive(Debug, Clone, Default)]
pub struct ViolationReport<S> {
    /// (bus, voltage excess in p.u., positive = outside limits)
    pub voltage: Vec<(usize, S)>,
    /// (segment index, amperes above effective ampacity)
    pub ampacity: Vec<(usize, S)>,
    /// fraction above rating, 0 when within limits
    pub transformer_overload: S,
}

impl<S: Scalar> ViolationReport<S> {
    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
            && self.ampacity.is_empty()
            && self.transformer_overload <= S::zero()
    }
}

pub fn screen_limits<S: Scalar>(
    grid: &GridNetwork,
    solution: &VoltageSolution<S>,
    v_min: S,
    v_max: S,
) -> ViolationReport<S> {
    let mut report = ViolationReport {
        voltage: Vec::new(),
        ampacity: Vec::new(),
        transformer_overload: S::zero(),
    };
    for (b, &v) in solution.v.iter().enumerate() {
        if v > v_max {
            report.voltage.push((b, v - v_max));
        } else if v < v_min {
            report.voltage.push((b, v_min - v));
        }
    }
    for (e, seg) in grid.segments.iter().enumerate() {
        let limit = S::of(grid.segment_ampacity_a(seg));
        let i = solution.line_currents[e];
        if i > limit {
            report.ampacity.push((e, i - limit));
        }
    }
    let loading = solution.transformer_kva / S::of(grid.transformer.rating_kva);
    if loading > S::one() {
        report.transformer_overload = loading - S::one();
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;

    fn zero_q(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }

    fn pu(grid: &crate::grid::GridNetwork, kw: &[f64]) -> Vec<f64> {
        kw.iter().map(|x| x / grid.s_base_kva()).collect()
    }

    #[test]
    fn flat_voltage_at_no_load() {
        let grid = fixtures::chain_pu(5, 0.01, 0.002);
        let n = grid.buses.len();
        let sol = nonlinear_loadflow::<f64>(&grid, &vec![0.0; n], &zero_q(n), 1.0).unwrap();
        assert!(sol.converged);
        for &v in &sol.v {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert!(sol.losses_kw.abs() < 1e-9);
        assert!(sol.slack_injection_kw.abs() < 1e-9);
    }

    #[test]
    fn two_bus_closed_form() {
        // one line of r = 0.01 pu, pure load P = 1 pu at the far end:
        // v satisfies v(1 - v) = r*P, so v = (1 + sqrt(1 - 4*r*P)) / 2.
        let grid = fixtures::chain_pu(2, 0.01, 0.0);
        let p = vec![0.0, -1.0]; // 1 pu load
        let sol = nonlinear_loadflow::<f64>(&grid, &p, &zero_q(2), 1.0).unwrap();
        assert!(sol.converged);
        let expected = (1.0 + (1.0f64 - 4.0 * 0.01).sqrt()) / 2.0;
        assert_relative_eq!(sol.v[1], expected, epsilon = 1e-7);
    }

    #[test]
    fn two_bus_generation_raises_voltage() {
        // same line, 1 pu generation: v(v - 1) = r*P, v = (1 + sqrt(1 + 4*r*P)) / 2.
        let grid = fixtures::chain_pu(2, 0.01, 0.0);
        let p = vec![0.0, 1.0];
        let sol = nonlinear_loadflow::<f64>(&grid, &p, &zero_q(2), 1.0).unwrap();
        let expected = (1.0 + (1.0f64 + 4.0 * 0.01).sqrt()) / 2.0;
        assert_relative_eq!(sol.v[1], expected, epsilon = 1e-7);
    }

    #[test]
    fn sweep_diverges_past_loadability_limit() {
        // v(1 - v) = r*P has no real root once r*P > 0.25.
        let grid = fixtures::chain_pu(2, 0.01, 0.0);
        let p = vec![0.0, -30.0];
        let sol = nonlinear_loadflow::<f64>(&grid, &p, &zero_q(2), 1.0).unwrap();
        assert!(!sol.converged);
    }

    #[test]
    fn power_balance_invariant() {
        let grid = fixtures::large_radial(23);
        let series = fixtures::scenario(&grid, 120.0, 1.2, 0.8, 1, 23);
        for t in [0, 6, 12, 18] {
            let p_kw = series.net_kw(t);
            let p = pu(&grid, &p_kw);
            let sol = nonlinear_loadflow::<f64>(&grid, &p, &zero_q(p.len()), 1.0).unwrap();
            assert!(sol.converged);
            let total: f64 = p_kw.iter().sum();
            let mismatch = total + sol.slack_injection_kw - sol.losses_kw;
            assert!(
                mismatch.abs() <= 1e-6 * grid.s_base_kva(),
                "t={t}: mismatch {mismatch} kW"
            );
        }
    }

    #[test]
    fn sensitivity_single_line_example() {
        let grid = fixtures::chain_pu(2, 0.01, 0.0);
        let model = build_sensitivity::<f64>(&grid, &vec![0.0; 2], &zero_q(2), 1.0).unwrap();
        assert_eq!(model.s_p.len(), 1);
        assert_relative_eq!(model.s_p[0][0], 0.01, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_chain_example() {
        // chain 0-1-2 with r = 0.01 per segment:
        // s_p = [[0.01, 0.01], [0.01, 0.02]].
        let grid = fixtures::chain_pu(3, 0.01, 0.0);
        let model = build_sensitivity::<f64>(&grid, &vec![0.0; 3], &zero_q(3), 1.0).unwrap();
        let expected = [[0.01, 0.01], [0.01, 0.02]];
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(model.s_p[a][b], expected[a][b], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_model_fixed_point_at_operating_point() {
        let grid = fixtures::large_radial(31);
        let series = fixtures::scenario(&grid, 110.0, 1.0, 0.9, 1, 31);
        let p = pu(&grid, &series.net_kw(12));
        let q = zero_q(p.len());
        let model = build_sensitivity::<f64>(&grid, &p, &q, 1.0).unwrap();
        let sweep = nonlinear_loadflow::<f64>(&grid, &p, &q, 1.0).unwrap();
        let lin = linear_voltages(&model, &p, &q).unwrap();
        for bus in 0..p.len() {
            assert_relative_eq!(lin[bus], sweep.v[bus], epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_model_tracks_sweep_nearby() {
        let grid = fixtures::large_radial(37);
        let series = fixtures::scenario(&grid, 25.0, 0.8, 0.3, 1, 37);
        let base = pu(&grid, &series.net_kw(12));
        let q = zero_q(base.len());
        let model = build_sensitivity::<f64>(&grid, &base, &q, 1.0).unwrap();
        // small perturbation: 1e-3 pu agreement; larger: 5e-3
        for (scale, tol) in [(1.05, 1e-3), (1.3, 5e-3)] {
            let p: Vec<f64> = base.iter().map(|x| x * scale).collect();
            let sweep = nonlinear_loadflow::<f64>(&grid, &p, &q, 1.0).unwrap();
            let lin = linear_voltages(&model, &p, &q).unwrap();
            for bus in 0..p.len() {
                assert!(
                    (lin[bus] - sweep.v[bus]).abs() <= tol,
                    "scale {scale} bus {bus}: lin {} vs sweep {}",
                    lin[bus],
                    sweep.v[bus]
                );
            }
        }
    }

    #[test]
    fn sensitivity_superposition() {
        let grid = fixtures::star(&[4, 4], 0.05);
        let n = grid.buses.len();
        let model = build_sensitivity::<f64>(&grid, &vec![0.0; n], &zero_q(n), 1.0).unwrap();
        let mut pa = vec![0.0; n];
        pa[2] = 0.08;
        let mut pb = vec![0.0; n];
        pb[6] = -0.05;
        let sum: Vec<f64> = pa.iter().zip(&pb).map(|(a, b)| a + b).collect();
        let va = linear_voltages(&model, &pa, &zero_q(n)).unwrap();
        let vb = linear_voltages(&model, &pb, &zero_q(n)).unwrap();
        let vs = linear_voltages(&model, &sum, &zero_q(n)).unwrap();
        for bus in 0..n {
            assert_relative_eq!(vs[bus], va[bus] + vb[bus] - model.v0[bus], epsilon = 1e-12);
        }
    }

    #[test]
    fn sensitivity_symmetric_and_nonnegative() {
        let grid = fixtures::large_radial(41);
        let n = grid.buses.len();
        let model = build_sensitivity::<f64>(&grid, &vec![0.0; n], &zero_q(n), 1.0).unwrap();
        let m = model.s_p.len();
        for a in 0..m {
            for b in 0..m {
                assert!(model.s_p[a][b] >= 0.0);
                assert!((model.s_p[a][b] - model.s_p[b][a]).abs() <= 1e-12);
                assert!((model.s_q[a][b] - model.s_q[b][a]).abs() <= 1e-12);
            }
        }
        // diagonal dominates within a feeder: own sensitivity is the path maximum
        for a in 0..m {
            for b in 0..m {
                assert!(model.s_p[a][b] <= model.s_p[a][a] + 1e-15);
            }
        }
    }

    #[test]
    fn transformer_reactance_raises_coupling() {
        let mut grid = fixtures::star(&[3, 3], 0.05);
        let n = grid.buses.len();
        let flat = build_sensitivity::<f64>(&grid, &vec![0.0; n], &zero_q(n), 1.0).unwrap();
        grid.transformer.impedance_ohm = 0.01;
        let with_x = build_sensitivity::<f64>(&grid, &vec![0.0; n], &zero_q(n), 1.0).unwrap();
        // reactance is common to every pair, including across feeders
        let (a, b) = (flat.pos(1).unwrap(), flat.pos(4).unwrap());
        assert!(with_x.s_q[a][b] > flat.s_q[a][b]);
        assert_relative_eq!(with_x.s_p[a][b], flat.s_p[a][b], epsilon = 1e-12);
    }

    #[test]
    fn screen_limits_flags_each_kind() {
        let grid = fixtures::chain_pu(3, 0.01, 0.0);
        // heavy generation: overvoltage plus ampacity and trafo stress
        let p = vec![0.0, 2.0, 2.0];
        let sol = nonlinear_loadflow::<f64>(&grid, &p, &zero_q(3), 1.0).unwrap();
        let report = screen_limits(&grid, &sol, 0.97, 1.03);
        assert!(!report.is_empty());
        assert!(report.voltage.iter().any(|&(bus, _)| bus == 2));
        assert!(report.transformer_overload > 0.0);
        let quiet = nonlinear_loadflow::<f64>(&grid, &vec![0.0; 3], &zero_q(3), 1.0).unwrap();
        assert!(screen_limits(&grid, &quiet, 0.97, 1.03).is_empty());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let grid = fixtures::chain_pu(3, 0.01, 0.0);
        let model = build_sensitivity::<f64>(&grid, &vec![0.0; 3], &zero_q(3), 1.0).unwrap();
        assert!(linear_voltages(&model, &[0.0; 2], &[0.0; 2]).is_err());
    }
}
