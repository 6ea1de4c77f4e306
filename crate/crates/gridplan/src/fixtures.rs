//! Synthetic grids and profiles used by tests, examples and the `synth` CLI
//! command. All generators are seeded and deterministic.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{Bus, BusKind, GridNetwork, InjectionSeries, LineSegment, LineType, Transformer};
use crate::pvgen::{self, IrradianceRecord, PvSystemParams, RoofSpec};

/// Standard 0.4 kV underground cable catalog.
pub fn catalog() -> Vec<LineType> {
    vec![
        LineType {
            name: "NAYY 4x50 SE".into(),
            r_per_km: 0.641,
            x_per_km: 0.085,
            ampacity: 144.0,
            acquisition_cost: 3_500.0,
        },
        LineType {
            name: "NAYY 4x120 SE".into(),
            r_per_km: 0.253,
            x_per_km: 0.080,
            ampacity: 245.0,
            acquisition_cost: 9_900.0,
        },
        LineType {
            name: "NAYY 4x150 SE".into(),
            r_per_km: 0.206,
            x_per_km: 0.078,
            ampacity: 275.0,
            acquisition_cost: 12_000.0,
        },
    ]
}

fn bus(id: usize, kind: BusKind) -> Bus {
    Bus {
        id,
        name: format!("bus {id}"),
        kind,
        v_nominal_v: 400.0,
    }
}

fn transformer(rating_kva: f64) -> Transformer {
    Transformer {
        rating_kva,
        lv_bus: 0,
        impedance_ohm: 0.0,
    }
}

/// Chain feeder with a custom single-type catalog giving each segment the
/// requested per-unit impedance (bus 0 is the slack).
pub fn chain_pu(n_buses: usize, r_pu: f64, x_pu: f64) -> GridNetwork {
    let rating = 630.0;
    let z_base = 0.4 * 0.4 * 1000.0 / rating;
    let buses = (0..n_buses)
        .map(|i| bus(i, if i == 0 { BusKind::Slack } else { BusKind::Load }))
        .collect();
    let segments = (1..n_buses)
        .map(|i| LineSegment {
            from: i - 1,
            to: i,
            length_km: 1.0,
            line_type: "custom".into(),
            n_parallel: 1,
        })
        .collect();
    GridNetwork {
        buses,
        segments,
        transformer: transformer(rating),
        catalog: vec![LineType {
            name: "custom".into(),
            r_per_km: r_pu * z_base,
            x_per_km: x_pu * z_base,
            ampacity: 1_000.0,
            acquisition_cost: 5_000.0,
        }],
    }
}

/// Star of chain feeders off the slack, NAYY 4x50, fixed segment length.
pub fn star(feeder_lengths: &[usize], segment_km: f64) -> GridNetwork {
    let mut buses = vec![bus(0, BusKind::Slack)];
    let mut segments = Vec::new();
    let mut next = 1usize;
    for &len in feeder_lengths {
        let mut prev = 0usize;
        for _ in 0..len {
            buses.push(bus(next, BusKind::Load));
            segments.push(LineSegment {
                from: prev,
                to: next,
                length_km: segment_km,
                line_type: "NAYY 4x50 SE".into(),
                n_parallel: 1,
            });
            prev = next;
            next += 1;
        }
    }
    GridNetwork {
        buses,
        segments,
        transformer: transformer(630.0),
        catalog: catalog(),
    }
}

/// Random radial feeder: `n_feeders` mostly-chain feeders with occasional
/// spurs; the large study case uses 106 buses and 4 feeders.
pub fn synth_radial(n_buses: usize, n_feeders: usize, seed: u64) -> GridNetwork {
    assert!(n_buses >= n_feeders + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buses = vec![bus(0, BusKind::Slack)];
    let mut segments = Vec::new();
    // feeder membership per bus, to attach spurs within the same feeder
    let mut feeder_buses: Vec<Vec<usize>> = vec![Vec::new(); n_feeders];
    let mut tips = vec![0usize; n_feeders];
    for f in 0..n_feeders {
        let id = f + 1;
        buses.push(bus(id, BusKind::Load));
        segments.push(LineSegment {
            from: 0,
            to: id,
            length_km: rng.gen_range(0.03..0.08),
            line_type: "NAYY 4x50 SE".into(),
            n_parallel: 1,
        });
        feeder_buses[f].push(id);
        tips[f] = id;
    }
    for id in n_feeders + 1..n_buses {
        let f = rng.gen_range(0..n_feeders);
        let extend_tip = rng.gen_bool(0.7);
        let parent = if extend_tip {
            tips[f]
        } else {
            feeder_buses[f][rng.gen_range(0..feeder_buses[f].len())]
        };
        buses.push(bus(id, BusKind::Load));
        segments.push(LineSegment {
            from: parent,
            to: id,
            length_km: rng.gen_range(0.02..0.06),
            line_type: "NAYY 4x50 SE".into(),
            n_parallel: 1,
        });
        feeder_buses[f].push(id);
        if extend_tip {
            tips[f] = id;
        }
    }
    GridNetwork {
        buses,
        segments,
        transformer: transformer(630.0),
        catalog: catalog(),
    }
}

/// The large study case: 106 buses, 4 feeders.
pub fn large_radial(seed: u64) -> GridNetwork {
    synth_radial(106, 4, seed)
}

pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2019, 6, 17, 0, 0, 0).unwrap()
}

/// Hourly clear-sky irradiance with the closure ghi = dni cos(zenith) + dhi.
pub fn clear_sky_irradiance(
    start: DateTime<Utc>,
    n_hours: usize,
    latitude: f64,
    longitude: f64,
) -> Vec<IrradianceRecord> {
    (0..n_hours)
        .map(|h| {
            let timestamp = start + Duration::hours(h as i64);
            let (zen, _) = pvgen::sun_position(timestamp, latitude, longitude);
            let cz = zen.to_radians().cos().max(0.0);
            let dni = if cz > 0.0 { 920.0 * cz.powf(0.4) } else { 0.0 };
            let dhi = 110.0 * cz.sqrt();
            IrradianceRecord {
                timestamp,
                ghi: dni * cz + dhi,
                dni,
                dhi,
                ambient_temp: 16.0 + 9.0 * cz,
            }
        })
        .collect()
}

/// Double-peak household load profile, kW, jittered per bus.
pub fn household_load(n_hours: usize, n_buses: usize, base_kw: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = (0..n_buses)
        .map(|b| if b == 0 { 0.0 } else { rng.gen_range(0.6..1.4) })
        .collect();
    (0..n_hours)
        .map(|h| {
            let hod = h % 24;
            let shape = match hod {
                6..=8 => 1.2,
                17..=21 => 1.6,
                0..=5 => 0.4,
                _ => 0.8,
            };
            scale.iter().map(|s| base_kw * shape * s).collect()
        })
        .collect()
}

/// South-ish roofs for every load bus, seeded.
pub fn roofs(grid: &GridNetwork, mean_area_m2: f64, seed: u64) -> Vec<RoofSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slack = grid.slack().id;
    grid.buses
        .iter()
        .filter(|b| b.id != slack)
        .map(|b| RoofSpec {
            bus: b.id,
            area: mean_area_m2 * rng.gen_range(0.6..1.4),
            azimuth: rng.gen_range(150.0..210.0),
            tilt: rng.gen_range(20.0..40.0),
        })
        .collect()
}

/// PV generation series for a grid: irradiance chain per roof, penetration
/// applied to the per-bus maximum capacities.
pub fn pv_injections(
    grid: &GridNetwork,
    roofs: &[RoofSpec],
    irradiance: &[IrradianceRecord],
    latitude: f64,
    longitude: f64,
    penetration: f64,
    params: &PvSystemParams,
) -> Result<Vec<Vec<f64>>, pvgen::PvError> {
    let n = grid.buses.len();
    let mut capacity = vec![0.0; n];
    for roof in roofs {
        capacity[roof.bus] += pvgen::max_pv_capacity(roof, params)?;
    }
    let capacity = pvgen::scale_penetration(&capacity, penetration)?;
    let mut gen = vec![vec![0.0; n]; irradiance.len()];
    for (t, rec) in irradiance.iter().enumerate() {
        let (zen, az) = pvgen::sun_position(rec.timestamp, latitude, longitude);
        for roof in roofs {
            if capacity[roof.bus] <= 0.0 {
                continue;
            }
            let poa = pvgen::poa_irradiance(rec, zen, az, roof, params.albedo);
            // capacity is shared across the bus's roofs in proportion to area;
            // a single roof per bus in the fixtures makes this exact
            gen[t][roof.bus] += pvgen::pv_power(poa, rec.ambient_temp, capacity[roof.bus], params);
        }
    }
    Ok(gen)
}

/// High-PV study fixture: two long feeders that violate a ±5% band at 80%
/// rooftop penetration (and a ±3% band already at 50%), plus one short feeder
/// that stays clean throughout. The returned series is at full penetration
/// over two days; scale its generation down for lower penetrations.
///
/// Segments are long (rural spacing) with proportionally small injections, so
/// the per-unit voltage profile matches a denser feeder while cable works are
/// priced per kilometre of trench.
pub fn calibrated_high_pv() -> (GridNetwork, InjectionSeries) {
    let grid = star(&[12, 12, 4], 1.6);
    let series = scenario(&grid, 1.6875, 0.0375, 1.0, 2, 11);
    (grid, series)
}

/// Complete synthetic scenario input: a grid with PV generation and household
/// load over `n_days`, at the given penetration of the rooftop potential.
pub fn scenario(
    grid: &GridNetwork,
    mean_roof_m2: f64,
    base_load_kw: f64,
    penetration: f64,
    n_days: usize,
    seed: u64,
) -> InjectionSeries {
    let (lat, lon) = (48.8, 9.2);
    let n_hours = 24 * n_days;
    let start = default_start();
    let irr = clear_sky_irradiance(start, n_hours, lat, lon);
    let roofs = roofs(grid, mean_roof_m2, seed ^ 0x5eed);
    let params = PvSystemParams::default();
    let gen = pv_injections(grid, &roofs, &irr, lat, lon, penetration, &params)
        .expect("valid synthetic roofs");
    let load = household_load(n_hours, grid.buses.len(), base_load_kw, seed ^ 0x10ad);
    let timestamps = (0..n_hours).map(|h| start + Duration::hours(h as i64)).collect();
    InjectionSeries::new(timestamps, load, gen).expect("synthetic series is consistent")
}
