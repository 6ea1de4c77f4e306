//! Monetary math: battery and cable cost tables, capex composition,
//! annualization, LCOE and LCOES.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::LineType;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("negative input: {0}")]
    Negative(&'static str),
    #[error("lifetime must be positive")]
    ZeroLifetime,
    #[error("annual energy must be positive")]
    ZeroEnergy,
    #[error("n_new_parallel must be at least 1")]
    ZeroParallel,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Battery installation cost rates (2019 price level).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryCostBook {
    /// euro/kWh, cells
    pub capacity_cost: f64,
    /// euro/kWh, peripheral system
    pub periphery_cost: f64,
    /// euro/kW, rises linearly with rated power
    pub power_electronics_cost: f64,
    /// euro per installed battery
    pub installation_cost: f64,
    /// years
    pub lifetime: f64,
}

impl Default for BatteryCostBook {
    fn default() -> Self {
        BatteryCostBook {
            capacity_cost: 130.0,
            periphery_cost: 87.0,
            power_electronics_cost: 93.0,
            installation_cost: 20_000.0,
            lifetime: 10.0,
        }
    }
}

/// Cable reinforcement cost rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridCostBook {
    /// euro/km trenching + laying, same for all 0.4 kV types
    pub installation_cost: f64,
    /// fraction of installation cost per line added in an existing trench
    pub parallel_surcharge: f64,
    /// euro, 630 kVA unit replacement
    pub transformer_cost: f64,
    /// years
    pub cable_lifetime: f64,
}

impl Default for GridCostBook {
    fn default() -> Self {
        GridCostBook {
            installation_cost: 60_000.0,
            parallel_surcharge: 0.15,
            transformer_cost: 21_000.0,
            cable_lifetime: 40.0,
        }
    }
}

/// The two cost tables, loadable from a single JSON file; every field has the
/// built-in default so the file is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CostBook {
    pub battery: BatteryCostBook,
    pub grid: GridCostBook,
}

impl CostBook {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CostError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CostError::Parse(e.to_string()))
    }
}

/// Installed cost of one battery in euro.
pub fn battery_capex(
    capacity_kwh: f64,
    power_kw: f64,
    book: &BatteryCostBook,
) -> Result<f64, CostError> {
    if capacity_kwh < 0.0 {
        return Err(CostError::Negative("capacity"));
    }
    if power_kw < 0.0 {
        return Err(CostError::Negative("power"));
    }
    Ok((book.capacity_cost + book.periphery_cost) * capacity_kwh
        + book.power_electronics_cost * power_kw
        + book.installation_cost)
}

/// Installed cost of `n_new_parallel` cables of `line_type` over `length_km`.
///
/// `shared_trench` covers additions along an existing corridor: each added
/// line pays the parallel surcharge instead of the full trench. A new route
/// pays one full installation plus the surcharge for every additional line.
pub fn line_capex(
    line_type: &LineType,
    length_km: f64,
    n_new_parallel: u32,
    shared_trench: bool,
    book: &GridCostBook,
) -> Result<f64, CostError> {
    if n_new_parallel < 1 {
        return Err(CostError::ZeroParallel);
    }
    if length_km < 0.0 {
        return Err(CostError::Negative("length"));
    }
    let n = n_new_parallel as f64;
    let install = if shared_trench {
        book.installation_cost * book.parallel_surcharge * n
    } else {
        book.installation_cost * (1.0 + book.parallel_surcharge * (n - 1.0))
    };
    Ok(length_km * (install + line_type.acquisition_cost * n))
}

/// Straight-line yearly cost, no discounting.
pub fn annualize(capex: f64, lifetime_years: f64) -> Result<f64, CostError> {
    if lifetime_years <= 0.0 {
        return Err(CostError::ZeroLifetime);
    }
    Ok(capex / lifetime_years)
}

fn annuity(value_per_year: f64, rate: f64, years: u32) -> f64 {
    (1..=years)
        .map(|t| value_per_year / (1.0 + rate).powi(t as i32))
        .sum()
}

/// Levelized cost of electricity, euro/kWh.
pub fn lcoe(
    capex: f64,
    annual_om: f64,
    annual_energy_kwh: f64,
    discount_rate: f64,
    years: u32,
) -> Result<f64, CostError> {
    if annual_energy_kwh <= 0.0 {
        return Err(CostError::ZeroEnergy);
    }
    let costs = capex + annuity(annual_om, discount_rate, years);
    let energy = annuity(annual_energy_kwh, discount_rate, years);
    Ok(costs / energy)
}

/// Levelized cost of energy storage, euro per discharged kWh: the LCOE
/// structure with charging cost in the cost stream and discharged energy in
/// the denominator.
pub fn lcoes(
    capex: f64,
    annual_om: f64,
    annual_charging_cost: f64,
    annual_discharged_kwh: f64,
    discount_rate: f64,
    years: u32,
) -> Result<f64, CostError> {
    if annual_discharged_kwh <= 0.0 {
        return Err(CostError::ZeroEnergy);
    }
    let costs = capex + annuity(annual_om + annual_charging_cost, discount_rate, years);
    let energy = annuity(annual_discharged_kwh, discount_rate, years);
    Ok(costs / energy)
}
