//! Planning toolkit for radial low-voltage distribution grids with high PV
//! penetration.
//!
//! Given a radial grid, hourly load/generation profiles and a cost book, the
//! crate computes a heuristic cable-reinforcement plan and an optimal battery
//! placement/sizing/dispatch plan over a worst-case window, and compares the
//! two by investment and annualized cost.
//!
//! The numeric kernels (load flow, sensitivity model, LP/MIP solver) are
//! generic over the scalar type via [`scalar::Scalar`]; the concrete `f64`
//! instantiations used by the planning layers are re-exported as type aliases
//! at the crate root.

pub mod battopt;
pub mod costbook;
pub mod fixtures;
pub mod grid;
pub mod lp;
pub mod powerflow;
pub mod pvgen;
pub mod reinforce;
pub mod report;
pub mod scalar;

/// Sensitivity model over `f64`, the instantiation used by the planners.
pub type Sensitivity = powerflow::SensitivityModel<f64>;
/// Load-flow solution over `f64`.
pub type Solution = powerflow::VoltageSolution<f64>;
/// Linear program over `f64`.
pub type Lp = lp::LinearProgram<f64>;
/// Mixed-integer program over `f64`.
pub type Mip = lp::MixedIntegerProgram<f64>;
/// Solve result over `f64`.
pub type LpResult = lp::SolveResult<f64>;
