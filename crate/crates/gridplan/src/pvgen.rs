//! PV generation chain: roof potential, solar geometry, plane-of-array
//! irradiance, module/inverter model, penetration scaling and worst-case
//! window selection.

use std::path::Path;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PvError {
    #[error("invalid roof: {0}")]
    InvalidRoof(String),
    #[error("invalid pv parameters: {0}")]
    InvalidParams(String),
    #[error("penetration fraction {0} outside [0, 1]")]
    PenetrationOutOfRange(f64),
    #[error("series of {len} hours is shorter than the {window} hour window")]
    SeriesTooShort { len: usize, window: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Roof available for PV, attached to a grid bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoofSpec {
    pub bus: usize,
    /// m²
    pub area: f64,
    /// degrees, 0 = north, 180 = south
    pub azimuth: f64,
    /// degrees from horizontal
    pub tilt: f64,
}

impl RoofSpec {
    pub fn validate(&self) -> Result<(), PvError> {
        if self.area <= 0.0 {
            return Err(PvError::InvalidRoof(format!(
                "bus {}: area must be positive",
                self.bus
            )));
        }
        if !(0.0..=90.0).contains(&self.tilt) {
            return Err(PvError::InvalidRoof(format!(
                "bus {}: tilt outside [0, 90]",
                self.bus
            )));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(PvError::InvalidRoof(format!(
                "bus {}: azimuth outside [0, 360)",
                self.bus
            )));
        }
        Ok(())
    }
}

/// Load a roof list from JSON (array of [`RoofSpec`]).
pub fn load_roofs(path: impl AsRef<Path>) -> Result<Vec<RoofSpec>, PvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let roofs: Vec<RoofSpec> =
        serde_json::from_str(&text).map_err(|e| PvError::Parse(e.to_string()))?;
    for r in &roofs {
        r.validate()?;
    }
    Ok(roofs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PvSystemParams {
    /// share of the roof area usable for modules
    pub usable_fraction: f64,
    /// kWp per m² of module area
    pub power_density: f64,
    /// power temperature coefficient, 1/°C
    pub temp_coefficient: f64,
    /// nominal operating cell temperature, °C
    pub noct: f64,
    pub inverter_efficiency: f64,
    pub dc_ac_ratio: f64,
    pub albedo: f64,
}

impl Default for PvSystemParams {
    fn default() -> Self {
        PvSystemParams {
            usable_fraction: 0.8,
            power_density: 0.2,
            temp_coefficient: -0.004,
            noct: 45.0,
            inverter_efficiency: 0.96,
            dc_ac_ratio: 1.0,
            albedo: 0.2,
        }
    }
}

impl PvSystemParams {
    pub fn validate(&self) -> Result<(), PvError> {
        if !(self.usable_fraction > 0.0 && self.usable_fraction <= 1.0) {
            return Err(PvError::InvalidParams("usable_fraction outside (0, 1]".into()));
        }
        if !(self.inverter_efficiency > 0.0 && self.inverter_efficiency <= 1.0) {
            return Err(PvError::InvalidParams(
                "inverter_efficiency outside (0, 1]".into(),
            ));
        }
        if self.power_density <= 0.0 {
            return Err(PvError::InvalidParams("power_density must be positive".into()));
        }
        if self.dc_ac_ratio <= 0.0 {
            return Err(PvError::InvalidParams("dc_ac_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// One hour of measured irradiance and ambient conditions.
#[derive(Debug, Clone)]
pub struct IrradianceRecord {
    pub timestamp: DateTime<Utc>,
    /// global horizontal, W/m²
    pub ghi: f64,
    /// direct normal, W/m²
    pub dni: f64,
    /// diffuse horizontal, W/m²
    pub dhi: f64,
    /// °C
    pub ambient_temp: f64,
}

/// Load irradiance CSV: `timestamp,ghi_wm2,dni_wm2,dhi_wm2,temp_c`.
pub fn load_irradiance(path: impl AsRef<Path>) -> Result<Vec<IrradianceRecord>, PvError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| PvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PvError::Parse(e.to_string()))?;
        let field = |i: usize| -> Result<f64, PvError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| PvError::Parse(format!("row {:?}: {e}", rec.get(0))))
        };
        out.push(IrradianceRecord {
            timestamp: rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|e| PvError::Parse(format!("bad timestamp: {e}")))?,
            ghi: field(1)?,
            dni: field(2)?,
            dhi: field(3)?,
            ambient_temp: field(4)?,
        });
    }
    Ok(out)
}

/// Maximum installable PV capacity for a roof, kWp.
pub fn max_pv_capacity(roof: &RoofSpec, params: &PvSystemParams) -> Result<f64, PvError> {
    roof.validate()?;
    params.validate()?;
    Ok(roof.area * params.usable_fraction * params.power_density)
}

/// Sun position in degrees: (zenith, azimuth from north, clockwise).
pub fn sun_position(timestamp: DateTime<Utc>, latitude: f64, longitude: f64) -> (f64, f64) {
    let doy = timestamp.ordinal() as f64;
    let hour = timestamp.hour() as f64
        + timestamp.minute() as f64 / 60.0
        + timestamp.second() as f64 / 3600.0;
    let gamma = 2.0 * std::f64::consts::PI / 365.0 * (doy - 1.0 + (hour - 12.0) / 24.0);
    // declination and equation of time (Spencer series)
    let decl = 0.006918 - 0.399912 * gamma.cos() + 0.070257 * gamma.sin()
        - 0.006758 * (2.0 * gamma).cos()
        + 0.000907 * (2.0 * gamma).sin()
        - 0.002697 * (3.0 * gamma).cos()
        + 0.00148 * (3.0 * gamma).sin();
    let eot_min = 229.18
        * (0.000075 + 0.001868 * gamma.cos()
            - 0.032077 * gamma.sin()
            - 0.014615 * (2.0 * gamma).cos()
            - 0.040849 * (2.0 * gamma).sin());
    let solar_time = hour + longitude / 15.0 + eot_min / 60.0;
    let hour_angle = (15.0 * (solar_time - 12.0)).to_radians();
    let lat = latitude.to_radians();
    let cos_zen = lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos();
    let zenith = cos_zen.clamp(-1.0, 1.0).acos().to_degrees();
    let az = f64::atan2(
        hour_angle.sin(),
        hour_angle.cos() * lat.sin() - decl.tan() * lat.cos(),
    )
    .to_degrees();
    let azimuth = (az + 180.0).rem_euclid(360.0);
    (zenith, azimuth)
}

/// Plane-of-array irradiance, W/m²: beam + isotropic sky diffuse + ground
/// reflection.
pub fn poa_irradiance(
    record: &IrradianceRecord,
    sun_zenith: f64,
    sun_azimuth: f64,
    roof: &RoofSpec,
    albedo: f64,
) -> f64 {
    let tilt = roof.tilt.to_radians();
    let zen = sun_zenith.to_radians();
    let cos_incidence = zen.cos() * tilt.cos()
        + zen.sin() * tilt.sin() * (sun_azimuth - roof.azimuth).to_radians().cos();
    let beam = if sun_zenith < 90.0 {
        record.dni * cos_incidence.max(0.0)
    } else {
        0.0
    };
    let diffuse = record.dhi * (1.0 + tilt.cos()) / 2.0;
    let ground = record.ghi * albedo * (1.0 - tilt.cos()) / 2.0;
    beam + diffuse + ground
}

/// AC output of a PV system, kW, with NOCT cell temperature and inverter
/// clipping.
pub fn pv_power(poa_wm2: f64, ambient_temp_c: f64, capacity_kwp: f64, params: &PvSystemParams) -> f64 {
    if poa_wm2 <= 0.0 || capacity_kwp <= 0.0 {
        return 0.0;
    }
    let cell_temp = ambient_temp_c + (params.noct - 20.0) / 800.0 * poa_wm2;
    let dc = capacity_kwp * (poa_wm2 / 1000.0)
        * (1.0 + params.temp_coefficient * (cell_temp - 25.0));
    let ac_limit = capacity_kwp / params.dc_ac_ratio * params.inverter_efficiency;
    (dc * params.inverter_efficiency).min(ac_limit).max(0.0)
}

/// Uniform scaling of per-bus capacities by a penetration fraction.
pub fn scale_penetration(capacities_kwp: &[f64], fraction: f64) -> Result<Vec<f64>, PvError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PvError::PenetrationOutOfRange(fraction));
    }
    Ok(capacities_kwp.iter().map(|c| c * fraction).collect())
}

/// Start index of the `window_hours` span with the highest total net load
/// (generation minus load); earliest index wins ties.
///
/// Every window sum is computed by direct summation so the argmax matches an
/// exhaustive scan exactly, without prefix-sum rounding artifacts.
pub fn select_worst_window(net_load_kw: &[f64], window_hours: usize) -> Result<usize, PvError> {
    if net_load_kw.len() < window_hours || window_hours == 0 {
        return Err(PvError::SeriesTooShort {
            len: net_load_kw.len(),
            window: window_hours,
        });
    }
    let mut best = 0usize;
    let mut best_sum = f64::NEG_INFINITY;
    for start in 0..=net_load_kw.len() - window_hours {
        let sum: f64 = net_load_kw[start..start + window_hours].iter().sum();
        if sum > best_sum {
            best_sum = sum;
            best = start;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn roof(area: f64, azimuth: f64, tilt: f64) -> RoofSpec {
        RoofSpec {
            bus: 1,
            area,
            azimuth,
            tilt,
        }
    }

    #[test]
    fn capacity_from_roof_area() {
        let params = PvSystemParams::default();
        let c = max_pv_capacity(&roof(100.0, 180.0, 30.0), &params).unwrap();
        assert_relative_eq!(c, 16.0);
        assert!(max_pv_capacity(&roof(0.0, 180.0, 30.0), &params).is_err());
        let bad = PvSystemParams {
            usable_fraction: 0.0,
            ..Default::default()
        };
        assert!(max_pv_capacity(&roof(100.0, 180.0, 30.0), &bad).is_err());
    }

    /// Scan a day for the maximum solar elevation.
    fn solar_noon(date: &str, lat: f64, lon: f64) -> (DateTime<Utc>, f64) {
        let day0: DateTime<Utc> = format!("{date}T00:00:00Z").parse().unwrap();
        let mut best = (day0, 180.0);
        for minute in 0..24 * 60 {
            let t = day0 + chrono::Duration::minutes(minute);
            let (zen, _) = sun_position(t, lat, lon);
            if zen < best.1 {
                best = (t, zen);
            }
        }
        best
    }

    #[test]
    fn equator_equinox_noon_overhead() {
        let (_, zen) = solar_noon("2019-03-21", 0.0, 0.0);
        assert!(zen < 1.0, "zenith at equinox noon was {zen}");
    }

    #[test]
    fn midnight_sun_below_horizon() {
        let t = Utc.with_ymd_and_hms(2019, 6, 21, 0, 0, 0).unwrap();
        let (zen, _) = sun_position(t, 48.8, 9.2);
        assert!(zen > 90.0);
    }

    #[test]
    fn stuttgart_solstice_noon() {
        let (_, zen) = solar_noon("2019-06-21", 48.8, 9.2);
        assert_relative_eq!(zen, 48.8 - 23.44, epsilon = 1.0);
    }

    #[test]
    fn horizontal_plane_reproduces_ghi() {
        // consistent record: ghi = dni cos(zen) + dhi
        let zen = 40.0f64;
        let rec = IrradianceRecord {
            timestamp: Utc.with_ymd_and_hms(2019, 6, 1, 12, 0, 0).unwrap(),
            dni: 700.0,
            dhi: 120.0,
            ghi: 700.0 * zen.to_radians().cos() + 120.0,
            ambient_temp: 20.0,
        };
        let poa = poa_irradiance(&rec, zen, 180.0, &roof(10.0, 180.0, 0.0), 0.2);
        assert_relative_eq!(poa, rec.ghi, epsilon = 1e-9);
    }

    #[test]
    fn no_beam_below_horizon() {
        let rec = IrradianceRecord {
            timestamp: Utc.with_ymd_and_hms(2019, 6, 1, 22, 0, 0).unwrap(),
            dni: 100.0,
            dhi: 10.0,
            ghi: 10.0,
            ambient_temp: 15.0,
        };
        let poa = poa_irradiance(&rec, 95.0, 300.0, &roof(10.0, 180.0, 35.0), 0.2);
        let tilt = 35.0f64.to_radians();
        let expected = 10.0 * (1.0 + tilt.cos()) / 2.0 + 10.0 * 0.2 * (1.0 - tilt.cos()) / 2.0;
        assert_relative_eq!(poa, expected, epsilon = 1e-12);
    }

    #[test]
    fn tilted_plane_matches_three_term_recomputation() {
        let rec = IrradianceRecord {
            timestamp: Utc.with_ymd_and_hms(2019, 6, 21, 12, 0, 0).unwrap(),
            dni: 800.0,
            dhi: 110.0,
            ghi: 750.0,
            ambient_temp: 25.0,
        };
        let (zen, az) = (25.4, 180.0);
        let r = roof(10.0, 180.0, 30.0);
        let poa = poa_irradiance(&rec, zen, az, &r, 0.2);
        // independent evaluation of the three terms
        let ci = (25.4f64.to_radians().cos() * 30.0f64.to_radians().cos())
            + 25.4f64.to_radians().sin() * 30.0f64.to_radians().sin();
        let expected = 800.0 * ci
            + 110.0 * (1.0 + 30.0f64.to_radians().cos()) / 2.0
            + 750.0 * 0.2 * (1.0 - 30.0f64.to_radians().cos()) / 2.0;
        assert_relative_eq!(poa, expected, epsilon = 1e-9);
    }

    #[test]
    fn pv_power_chain() {
        let params = PvSystemParams::default();
        assert_eq!(pv_power(0.0, 20.0, 10.0, &params), 0.0);
        // cell 51.25 °C, dc = 10 * (1 - 0.105) = 8.95, ac = 8.592
        let ac = pv_power(1000.0, 20.0, 10.0, &params);
        assert_relative_eq!(ac, 8.592, epsilon = 1e-9);
        // clipping at capacity * inverter efficiency
        let clipped = pv_power(1400.0, -5.0, 10.0, &params);
        assert_relative_eq!(clipped, 10.0 * 0.96, epsilon = 1e-12);
    }

    #[test]
    fn penetration_scaling() {
        let caps = vec![10.0, 20.0, 0.0];
        assert_eq!(scale_penetration(&caps, 1.0).unwrap(), caps);
        assert_eq!(scale_penetration(&caps, 0.5).unwrap(), vec![5.0, 10.0, 0.0]);
        let c8 = scale_penetration(&caps, 0.8).unwrap();
        assert_relative_eq!(c8[1], 16.0);
        assert!(scale_penetration(&caps, 1.2).is_err());
        // 80 % is exactly 1.6x the 50 % scenario
        let c5 = scale_penetration(&caps, 0.5).unwrap();
        for (a, b) in c8.iter().zip(&c5) {
            assert_relative_eq!(*a, 1.6 * b, max_relative = 1e-12);
        }
    }

    #[test]
    fn window_selection_examples() {
        let constant = vec![1.0; 100];
        assert_eq!(select_worst_window(&constant, 72).unwrap(), 0);
        let mut spike = vec![0.0; 200];
        spike[100] = 5.0;
        assert_eq!(select_worst_window(&spike, 72).unwrap(), 29);
        assert!(select_worst_window(&[1.0; 10], 72).is_err());
    }

    fn brute_force_window(series: &[f64], w: usize) -> usize {
        let mut best = 0;
        let mut best_sum = f64::NEG_INFINITY;
        for s in 0..=series.len() - w {
            let mut sum = 0.0;
            for v in &series[s..s + w] {
                sum += v;
            }
            if sum > best_sum {
                best_sum = sum;
                best = s;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn window_matches_brute_force(
            series in proptest::collection::vec(-50.0f64..50.0, 80..2000),
            w in 1usize..79,
        ) {
            prop_assert_eq!(
                select_worst_window(&series, w).unwrap(),
                brute_force_window(&series, w)
            );
        }

        #[test]
        fn pv_power_monotone_below_clipping(
            poa_lo in 0.0f64..500.0,
            delta in 0.0f64..300.0,
        ) {
            let params = PvSystemParams::default();
            let a = pv_power(poa_lo, 15.0, 10.0, &params);
            let b = pv_power(poa_lo + delta, 15.0, 10.0, &params);
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn horizontal_identity_on_consistent_records(
            zen in 0.0f64..89.0,
            dni in 0.0f64..1000.0,
            dhi in 0.0f64..400.0,
        ) {
            let rec = IrradianceRecord {
                timestamp: chrono::Utc.with_ymd_and_hms(2019, 6, 1, 12, 0, 0).unwrap(),
                dni,
                dhi,
                ghi: dni * zen.to_radians().cos() + dhi,
                ambient_temp: 20.0,
            };
            let poa = poa_irradiance(&rec, zen, 123.0, &roof(1.0, 180.0, 0.0), 0.2);
            prop_assert!((poa - rec.ghi).abs() < 1e-9);
        }
    }
}
