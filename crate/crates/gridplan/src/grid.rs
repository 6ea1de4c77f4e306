//! Radial grid model: buses, line segments, line-type catalog, transformer
//! and hourly injection series, with JSON/CSV loading and validation.

use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("bus ids must be contiguous from 0 (got {got} buses, max id {max_id})")]
    NonContiguousIds { got: usize, max_id: usize },
    #[error("expected exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("segment {from}-{to}: unknown line type '{name}'")]
    UnknownLineType { from: usize, to: usize, name: String },
    #[error("segment {from}-{to}: {reason}")]
    BadSegment { from: usize, to: usize, reason: String },
    #[error("non-radial topology: {0}")]
    NonRadial(String),
    #[error("grid is not connected: bus {0} unreachable from slack")]
    Disconnected(usize),
    #[error("bad catalog entry '{name}': {reason}")]
    BadCatalog { name: String, reason: String },
    #[error("catalog types '{a}' and '{b}' are not strictly ordered (lower r must pair with higher ampacity)")]
    CatalogOrdering { a: String, b: String },
    #[error("bad bus {id}: {reason}")]
    BadBus { id: usize, reason: String },
    #[error("bad transformer: {0}")]
    BadTransformer(String),
    #[error("unknown bus id {0}")]
    UnknownBus(usize),
    #[error("injection series: {0}")]
    Injection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub name: String,
    pub kind: BusKind,
    /// Nominal voltage in volts (line-to-line).
    pub v_nominal_v: f64,
}

/// Cable type from the catalog, priced per km.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineType {
    pub name: String,
    /// ohm/km
    pub r_per_km: f64,
    /// ohm/km
    pub x_per_km: f64,
    /// amperes, continuous rating per cable
    pub ampacity: f64,
    /// euro/km, cable acquisition only (trench/installation priced in the cost book)
    pub acquisition_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineSegment {
    pub from: usize,
    pub to: usize,
    pub length_km: f64,
    /// Catalog type name.
    #[serde(rename = "type")]
    pub line_type: String,
    pub n_parallel: u32,
}

impl LineSegment {
    /// Impedance multiplier for parallel cables, kept exact.
    pub fn parallel_multiplier(&self) -> Ratio<u32> {
        Ratio::new(1, self.n_parallel)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transformer {
    pub rating_kva: f64,
    /// Bus id of the LV busbar the transformer feeds; must be the slack bus.
    pub lv_bus: usize,
    /// Series impedance referred to the LV side, modeled as leakage reactance.
    pub impedance_ohm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridNetwork {
    pub buses: Vec<Bus>,
    pub segments: Vec<LineSegment>,
    pub transformer: Transformer,
    pub catalog: Vec<LineType>,
}

/// One feeder hanging off the LV busbar: the subtree rooted at a direct
/// child of the slack bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    /// Direct child of the slack bus that roots this branch.
    pub root: usize,
    /// All buses of the subtree, root first, in BFS order.
    pub buses: Vec<usize>,
    /// Segment indices of the subtree, including the segment slack-root.
    pub segments: Vec<usize>,
}

impl GridNetwork {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let grid: GridNetwork =
            serde_json::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.buses.len();
        if n == 0 {
            return Err(GridError::Parse("grid has no buses".into()));
        }
        let mut seen = vec![false; n];
        let mut max_id = 0;
        for b in &self.buses {
            max_id = max_id.max(b.id);
            if b.id >= n {
                return Err(GridError::NonContiguousIds { got: n, max_id });
            }
            if seen[b.id] {
                return Err(GridError::DuplicateBusId(b.id));
            }
            seen[b.id] = true;
            if b.v_nominal_v <= 0.0 {
                return Err(GridError::BadBus {
                    id: b.id,
                    reason: "v_nominal must be positive".into(),
                });
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(GridError::SlackCount(slacks));
        }
        for t in &self.catalog {
            if t.r_per_km <= 0.0 {
                return Err(GridError::BadCatalog {
                    name: t.name.clone(),
                    reason: "r_per_km must be positive".into(),
                });
            }
            if t.ampacity <= 0.0 {
                return Err(GridError::BadCatalog {
                    name: t.name.clone(),
                    reason: "ampacity must be positive".into(),
                });
            }
        }
        // Lower resistance must pair with strictly higher ampacity across the catalog.
        for (i, a) in self.catalog.iter().enumerate() {
            for b in &self.catalog[i + 1..] {
                let consistent = (a.r_per_km < b.r_per_km && a.ampacity > b.ampacity)
                    || (a.r_per_km > b.r_per_km && a.ampacity < b.ampacity);
                if !consistent {
                    return Err(GridError::CatalogOrdering {
                        a: a.name.clone(),
                        b: b.name.clone(),
                    });
                }
            }
        }
        for s in &self.segments {
            if s.from >= n || s.to >= n {
                return Err(GridError::BadSegment {
                    from: s.from,
                    to: s.to,
                    reason: "endpoint is not a known bus".into(),
                });
            }
            if s.from == s.to {
                return Err(GridError::BadSegment {
                    from: s.from,
                    to: s.to,
                    reason: "self-loop".into(),
                });
            }
            if s.length_km <= 0.0 {
                return Err(GridError::BadSegment {
                    from: s.from,
                    to: s.to,
                    reason: "length must be positive".into(),
                });
            }
            if s.n_parallel < 1 {
                return Err(GridError::BadSegment {
                    from: s.from,
                    to: s.to,
                    reason: "n_parallel must be at least 1".into(),
                });
            }
            if self.line_type(&s.line_type).is_none() {
                return Err(GridError::UnknownLineType {
                    from: s.from,
                    to: s.to,
                    name: s.line_type.clone(),
                });
            }
        }
        if self.transformer.rating_kva <= 0.0 {
            return Err(GridError::BadTransformer("rating must be positive".into()));
        }
        if self.transformer.lv_bus != self.slack().id {
            return Err(GridError::BadTransformer(format!(
                "lv_bus {} must be the slack bus {}",
                self.transformer.lv_bus,
                self.slack().id
            )));
        }
        // Radial: bus count = segment count + 1 and everything reachable from slack.
        if self.segments.len() + 1 != n {
            return Err(GridError::NonRadial(format!(
                "{} buses need {} segments for a tree, got {}",
                n,
                n - 1,
                self.segments.len()
            )));
        }
        let adj = self.adjacency();
        let mut visited = vec![false; n];
        let mut parent_edge: Vec<Option<usize>> = vec![None; n];
        let mut queue = std::collections::VecDeque::new();
        let slack = self.slack().id;
        visited[slack] = true;
        queue.push_back(slack);
        while let Some(u) = queue.pop_front() {
            for &(v, e) in &adj[u] {
                if Some(e) == parent_edge[u] {
                    continue;
                }
                if visited[v] {
                    let s = &self.segments[e];
                    return Err(GridError::NonRadial(format!(
                        "segment {}-{} closes a loop",
                        s.from, s.to
                    )));
                }
                visited[v] = true;
                parent_edge[v] = Some(e);
                queue.push_back(v);
            }
        }
        if let Some(b) = visited.iter().position(|v| !v) {
            return Err(GridError::Disconnected(b));
        }
        Ok(())
    }

    pub fn slack(&self) -> &Bus {
        self.buses
            .iter()
            .find(|b| b.kind == BusKind::Slack)
            .expect("validated grid has a slack bus")
    }

    pub fn line_type(&self, name: &str) -> Option<&LineType> {
        self.catalog.iter().find(|t| t.name == name)
    }

    /// Effective series resistance of a segment in ohm.
    pub fn segment_r_ohm(&self, seg: &LineSegment) -> f64 {
        let t = self.line_type(&seg.line_type).expect("validated type");
        let m = seg.parallel_multiplier();
        t.r_per_km * seg.length_km * (*m.numer() as f64) / (*m.denom() as f64)
    }

    /// Effective series reactance of a segment in ohm.
    pub fn segment_x_ohm(&self, seg: &LineSegment) -> f64 {
        let t = self.line_type(&seg.line_type).expect("validated type");
        let m = seg.parallel_multiplier();
        t.x_per_km * seg.length_km * (*m.numer() as f64) / (*m.denom() as f64)
    }

    /// Effective ampacity of a segment in amperes.
    pub fn segment_ampacity_a(&self, seg: &LineSegment) -> f64 {
        let t = self.line_type(&seg.line_type).expect("validated type");
        t.ampacity * seg.n_parallel as f64
    }

    /// Adjacency list: bus -> [(neighbor, segment index)].
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (e, s) in self.segments.iter().enumerate() {
            adj[s.from].push((s.to, e));
            adj[s.to].push((s.from, e));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Parent bus and parent segment index per bus, rooted at the slack.
    pub fn tree_parents(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let adj = self.adjacency();
        let n = self.buses.len();
        let slack = self.slack().id;
        let mut parent = vec![None; n];
        let mut parent_seg = vec![None; n];
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        visited[slack] = true;
        queue.push_back(slack);
        while let Some(u) = queue.pop_front() {
            for &(v, e) in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    parent_seg[v] = Some(e);
                    queue.push_back(v);
                }
            }
        }
        (parent, parent_seg)
    }

    /// Feeders hanging off the slack busbar, ordered by root bus id.
    pub fn branches(&self) -> Vec<Branch> {
        let adj = self.adjacency();
        let slack = self.slack().id;
        let (parent, parent_seg) = self.tree_parents();
        let mut out = Vec::new();
        for &(root, root_seg) in &adj[slack] {
            let mut buses = vec![root];
            let mut segments = vec![root_seg];
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(root);
            while let Some(u) = queue.pop_front() {
                for &(v, e) in &adj[u] {
                    if parent[v] == Some(u) {
                        buses.push(v);
                        segments.push(e);
                        queue.push_back(v);
                    }
                }
            }
            let _ = parent_seg;
            out.push(Branch {
                root,
                buses,
                segments,
            });
        }
        out.sort_by_key(|b| b.root);
        out
    }

    /// Segment indices on the unique path from the slack to `bus`, slack-first.
    pub fn path_to_slack(&self, bus: usize) -> Result<Vec<usize>, GridError> {
        if bus >= self.buses.len() {
            return Err(GridError::UnknownBus(bus));
        }
        let (parent, parent_seg) = self.tree_parents();
        let mut path = Vec::new();
        let mut u = bus;
        while let Some(p) = parent[u] {
            path.push(parent_seg[u].expect("parent implies parent segment"));
            u = p;
        }
        path.reverse();
        Ok(path)
    }

    // Per-unit bases. Single-phase equivalent positive-sequence model with
    // S_base = transformer rating and V_base = slack nominal voltage.
    pub fn s_base_kva(&self) -> f64 {
        self.transformer.rating_kva
    }

    pub fn v_base_v(&self) -> f64 {
        self.slack().v_nominal_v
    }

    pub fn z_base_ohm(&self) -> f64 {
        let v = self.v_base_v();
        v * v / (self.s_base_kva() * 1e3)
    }

    pub fn i_base_a(&self) -> f64 {
        self.s_base_kva() * 1e3 / (f64::sqrt(3.0) * self.v_base_v())
    }
}

/// Hourly per-bus active-power profiles, kW, generation and load separate.
#[derive(Debug, Clone)]
pub struct InjectionSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    /// load[t][bus] in kW, >= 0
    pub load: Vec<Vec<f64>>,
    /// gen[t][bus] in kW, >= 0
    pub gen: Vec<Vec<f64>>,
}

impl InjectionSeries {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        load: Vec<Vec<f64>>,
        gen: Vec<Vec<f64>>,
    ) -> Result<Self, GridError> {
        let s = Self {
            timestamps,
            load,
            gen,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let t = self.timestamps.len();
        if self.load.len() != t || self.gen.len() != t {
            return Err(GridError::Injection(
                "load/gen row count does not match timestamps".into(),
            ));
        }
        let width = self.load.first().map_or(0, |r| r.len());
        for (i, (l, g)) in self.load.iter().zip(&self.gen).enumerate() {
            if l.len() != width || g.len() != width {
                return Err(GridError::Injection(format!(
                    "row {i} has inconsistent bus dimension"
                )));
            }
            if l.iter().chain(g.iter()).any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(GridError::Injection(format!(
                    "row {i} contains negative or non-finite power"
                )));
            }
        }
        for w in self.timestamps.windows(2) {
            if w[1] - w[0] != Duration::hours(1) {
                return Err(GridError::Injection(format!(
                    "timestamps not hourly between {} and {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn n_hours(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_buses(&self) -> usize {
        self.load.first().map_or(0, |r| r.len())
    }

    /// Net injection (generation minus load) in kW at hour `t`.
    pub fn net_kw(&self, t: usize) -> Vec<f64> {
        self.gen[t]
            .iter()
            .zip(&self.load[t])
            .map(|(g, l)| g - l)
            .collect()
    }

    /// Grid-total net injection series in kW.
    pub fn total_net_kw(&self) -> Vec<f64> {
        (0..self.n_hours())
            .map(|t| self.net_kw(t).iter().sum())
            .collect()
    }

    /// Sub-series covering `window` hours starting at `start`.
    pub fn slice(&self, start: usize, window: usize) -> InjectionSeries {
        InjectionSeries {
            timestamps: self.timestamps[start..start + window].to_vec(),
            load: self.load[start..start + window].to_vec(),
            gen: self.gen[start..start + window].to_vec(),
        }
    }

    /// Load from CSV with header `timestamp,bus_<id>_load_kw,bus_<id>_gen_kw,...`.
    /// Buses without columns default to zero.
    pub fn from_csv(path: impl AsRef<Path>, n_buses: usize) -> Result<Self, GridError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file, n_buses)
    }

    pub fn from_csv_reader(reader: impl std::io::Read, n_buses: usize) -> Result<Self, GridError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| GridError::Injection(e.to_string()))?
            .clone();
        if headers.get(0) != Some("timestamp") {
            return Err(GridError::Injection(
                "first column must be 'timestamp'".into(),
            ));
        }
        // column index -> (bus, is_load)
        let mut cols: Vec<(usize, usize, bool)> = Vec::new();
        for (i, h) in headers.iter().enumerate().skip(1) {
            let rest = h
                .strip_prefix("bus_")
                .ok_or_else(|| GridError::Injection(format!("unexpected column '{h}'")))?;
            let (bus, is_load) = if let Some(b) = rest.strip_suffix("_load_kw") {
                (b, true)
            } else if let Some(b) = rest.strip_suffix("_gen_kw") {
                (b, false)
            } else {
                return Err(GridError::Injection(format!("unexpected column '{h}'")));
            };
            let bus: usize = bus
                .parse()
                .map_err(|_| GridError::Injection(format!("bad bus id in column '{h}'")))?;
            if bus >= n_buses {
                return Err(GridError::Injection(format!(
                    "column '{h}' references bus {bus} outside the grid"
                )));
            }
            cols.push((i, bus, is_load));
        }
        let mut timestamps = Vec::new();
        let mut load = Vec::new();
        let mut gen = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| GridError::Injection(e.to_string()))?;
            let ts: DateTime<Utc> = rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|e| GridError::Injection(format!("bad timestamp: {e}")))?;
            let mut lrow = vec![0.0; n_buses];
            let mut grow = vec![0.0; n_buses];
            for &(i, bus, is_load) in &cols {
                let v: f64 = rec
                    .get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|e| GridError::Injection(format!("bad value at {ts}: {e}")))?;
                if is_load {
                    lrow[bus] = v;
                } else {
                    grow[bus] = v;
                }
            }
            timestamps.push(ts);
            load.push(lrow);
            gen.push(grow);
        }
        Self::new(timestamps, load, gen)
    }

    /// Write in the same CSV layout `from_csv` reads.
    pub fn to_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "timestamp")?;
        for b in 0..self.n_buses() {
            write!(w, ",bus_{b}_load_kw,bus_{b}_gen_kw")?;
        }
        writeln!(w)?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            write!(w, "{}", ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))?;
            for b in 0..self.n_buses() {
                write!(w, ",{},{}", self.load[t][b], self.gen[t][b])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn three_bus_json() -> String {
        r#"{
            "buses": [
                {"id": 0, "name": "trafo lv", "kind": "slack", "v_nominal_v": 400.0},
                {"id": 1, "name": "house a", "kind": "load", "v_nominal_v": 400.0},
                {"id": 2, "name": "house b", "kind": "load", "v_nominal_v": 400.0}
            ],
            "segments": [
                {"from": 0, "to": 1, "length_km": 0.05, "type": "NAYY 4x50 SE", "n_parallel": 1},
                {"from": 1, "to": 2, "length_km": 0.04, "type": "NAYY 4x50 SE", "n_parallel": 1}
            ],
            "transformer": {"rating_kva": 630.0, "lv_bus": 0, "impedance_ohm": 0.0},
            "catalog": [
                {"name": "NAYY 4x50 SE", "r_per_km": 0.641, "x_per_km": 0.085,
                 "ampacity": 144.0, "acquisition_cost": 3500.0}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn loads_minimal_feeder() {
        let grid = GridNetwork::from_json(&three_bus_json()).unwrap();
        assert_eq!(grid.buses.len(), 3);
        assert_eq!(grid.segments.len(), 2);
    }

    #[test]
    fn rejects_loop_edge() {
        let mut grid: GridNetwork = serde_json::from_str(&three_bus_json()).unwrap();
        grid.segments.push(LineSegment {
            from: 0,
            to: 2,
            length_km: 0.1,
            line_type: "NAYY 4x50 SE".into(),
            n_parallel: 1,
        });
        grid.buses.push(Bus {
            id: 3,
            name: "pad".into(),
            kind: BusKind::Load,
            v_nominal_v: 400.0,
        });
        // keep bus count = segment count + 1 so the loop itself is caught
        grid.segments.push(LineSegment {
            from: 2,
            to: 3,
            length_km: 0.1,
            line_type: "NAYY 4x50 SE".into(),
            n_parallel: 1,
        });
        let err = grid.validate().unwrap_err();
        assert!(matches!(err, GridError::NonRadial(_)), "{err}");
    }

    #[test]
    fn rejects_wrong_edge_count() {
        let mut grid: GridNetwork = serde_json::from_str(&three_bus_json()).unwrap();
        grid.segments.pop();
        assert!(matches!(grid.validate(), Err(GridError::NonRadial(_))));
    }

    #[test]
    fn rejects_duplicate_bus_id() {
        let mut grid: GridNetwork = serde_json::from_str(&three_bus_json()).unwrap();
        grid.buses[2].id = 1;
        assert!(matches!(grid.validate(), Err(GridError::DuplicateBusId(1))));
    }

    #[test]
    fn rejects_unknown_line_type() {
        let mut grid: GridNetwork = serde_json::from_str(&three_bus_json()).unwrap();
        grid.segments[1].line_type = "NAYY 4x300 SE".into();
        assert!(matches!(
            grid.validate(),
            Err(GridError::UnknownLineType { from: 1, to: 2, .. })
        ));
    }

    #[test]
    fn large_radial_fixture_is_valid() {
        let grid = fixtures::large_radial(7);
        assert_eq!(grid.buses.len(), 106);
        grid.validate().unwrap();
        assert_eq!(grid.branches().len(), 4);
    }

    #[test]
    fn branches_partition_non_slack_buses() {
        let grid = fixtures::large_radial(11);
        let branches = grid.branches();
        let mut seen = vec![0usize; grid.buses.len()];
        for b in &branches {
            for &bus in &b.buses {
                seen[bus] += 1;
            }
        }
        assert_eq!(seen[grid.slack().id], 0);
        for (bus, count) in seen.iter().enumerate() {
            if bus != grid.slack().id {
                assert_eq!(*count, 1, "bus {bus} in {count} branches");
            }
        }
    }

    #[test]
    fn star_and_chain_branch_counts() {
        let star = fixtures::star(&[3, 3, 3], 0.05);
        assert_eq!(star.branches().len(), 3);
        let chain = fixtures::chain_pu(6, 0.01, 0.002);
        let branches = chain.branches();
        assert_eq!(branches.len(), 1);
        assert_eq!(branches[0].buses.len(), 5);
    }

    #[test]
    fn path_to_slack_examples() {
        let chain = fixtures::chain_pu(5, 0.01, 0.002);
        assert!(chain.path_to_slack(0).unwrap().is_empty());
        assert_eq!(chain.path_to_slack(4).unwrap().len(), 4);
        assert!(chain.path_to_slack(99).is_err());
    }

    /// BFS oracle, independent of the parent-pointer implementation.
    fn bfs_path(grid: &GridNetwork, target: usize) -> Vec<usize> {
        let adj = grid.adjacency();
        let slack = grid.slack().id;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; grid.buses.len()];
        let mut queue = std::collections::VecDeque::from([slack]);
        let mut visited = vec![false; grid.buses.len()];
        visited[slack] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, e) in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    prev[v] = Some((u, e));
                    queue.push_back(v);
                }
            }
        }
        let mut path = Vec::new();
        let mut u = target;
        while let Some((p, e)) = prev[u] {
            path.push(e);
            u = p;
        }
        path.reverse();
        path
    }

    #[test]
    fn path_matches_bfs_oracle() {
        let grid = fixtures::large_radial(13);
        for bus in [5, 17, 42, 77, 105] {
            assert_eq!(grid.path_to_slack(bus).unwrap(), bfs_path(&grid, bus));
        }
    }

    #[test]
    fn leaf_paths_cover_every_segment() {
        let grid = fixtures::large_radial(17);
        let (parent, _) = grid.tree_parents();
        let mut has_child = vec![false; grid.buses.len()];
        for b in 0..grid.buses.len() {
            if let Some(p) = parent[b] {
                has_child[p] = true;
            }
        }
        let mut covered = vec![false; grid.segments.len()];
        for leaf in (0..grid.buses.len()).filter(|&b| !has_child[b]) {
            for seg in grid.path_to_slack(leaf).unwrap() {
                covered[seg] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn parallel_multiplier_is_exact() {
        let mut seg = LineSegment {
            from: 0,
            to: 1,
            length_km: 0.37,
            line_type: "NAYY 4x50 SE".into(),
            n_parallel: 3,
        };
        let m3 = seg.parallel_multiplier();
        seg.n_parallel = 6;
        let m6 = seg.parallel_multiplier();
        // doubling the parallel count exactly halves the multiplier
        assert_eq!(m3, m6 * num_rational::Ratio::new(2, 1));
    }

    #[test]
    fn injection_csv_round_trip() {
        let grid = fixtures::star(&[2, 2], 0.05);
        let series = fixtures::scenario(&grid, 120.0, 1.0, 0.8, 2, 3);
        let mut buf = Vec::new();
        series.to_csv(&mut buf).unwrap();
        let reloaded = InjectionSeries::from_csv_reader(&buf[..], grid.buses.len()).unwrap();
        assert_eq!(reloaded.timestamps, series.timestamps);
        assert_eq!(reloaded.load, series.load);
        assert_eq!(reloaded.gen, series.gen);
    }

    #[test]
    fn injection_rejects_non_hourly() {
        let t0 = fixtures::default_start();
        let err = InjectionSeries::new(
            vec![t0, t0 + chrono::Duration::minutes(30)],
            vec![vec![0.0], vec![0.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap_err();
        assert!(matches!(err, GridError::Injection(_)));
    }
}
