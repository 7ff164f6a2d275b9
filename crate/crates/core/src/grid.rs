//! Network data model, case ingestion and PTDF computation.
//!
//! A case is a JSON document holding the network, generators, wind farms,
//! conductor parameters, optional per-site weather and the ambient forecast
//! error model. Weather can also be supplied separately as CSV.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thermal::{ConductorSpec, WeatherSample};

/// Case schema version understood by this crate.
pub const SCHEMA_VERSION: u32 = 1;

/// Rating used for MATPOWER branches with an unlimited (zero) `rateA`.
pub const UNLIMITED_RATING_MW: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    /// Load per period, MW.
    #[serde(default)]
    pub load_mw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Series susceptance in per-unit of the DC model (1/x).
    pub susceptance: f64,
    pub static_rating_mw: f64,
    /// Key into `SystemCase::conductors`. Lines without a conductor keep their
    /// static rating in every mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductor: Option<String>,
    /// Weather site along the line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_temp_c: Option<f64>,
}

impl Edge {
    /// True when the line has a conductor and a weather site, so that its
    /// rating can be computed dynamically.
    pub fn is_dynamic(&self) -> bool {
        self.conductor.is_some() && self.site.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: String,
    pub node: String,
    /// Linear cost, $/MWh.
    pub c1: f64,
    /// Quadratic cost, $/MW²h.
    pub c2: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Ramp limits per period, MW.
    pub ramp_up: f64,
    pub ramp_dn: f64,
    /// kg/kWh.
    #[serde(default)]
    pub emission_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindFarm {
    pub id: String,
    pub node: String,
    pub site: String,
    pub swept_area_m2: f64,
    /// Forecast per period, MW. Derived from the site weather when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast_mw: Option<Vec<f64>>,
    /// Turbine capacity used to clip the derived forecast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_mw: Option<f64>,
}

/// Ambient forecast-error statistics. Errors are ordered site-major with the
/// variables `[wind speed, wind direction, ambient temperature]` per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbientErrors {
    pub sites: Vec<String>,
    /// Standard deviations of speed (m/s), direction (deg) and temperature (°C).
    pub std: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_site_correlation: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_site_correlation: Option<Vec<Vec<f64>>>,
    /// Full covariance over all `3 × sites` variables; overrides the block form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemCase {
    pub schema_version: u32,
    pub name: String,
    pub horizon: usize,
    pub period_s: f64,
    pub slack: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub wind_farms: Vec<WindFarm>,
    #[serde(default)]
    pub conductors: BTreeMap<String, ConductorSpec>,
    /// Weather per site, one sample per period.
    #[serde(default)]
    pub weather: BTreeMap<String, Vec<WeatherSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambient_errors: Option<AmbientErrors>,
    /// Per-line override of the rating error standard deviation, MW.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rating_error_std_mw: BTreeMap<String, f64>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite, got {v}")))
    }
}

impl SystemCase {
    /// Parses and validates a case from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let case: SystemCase =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if case.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                case.schema_version
            )));
        }
        case.validate()?;
        Ok(case)
    }

    /// Checks every structural and physical invariant, naming the offending
    /// field on failure.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return Err(invalid(format!("period_s must be > 0, got {}", self.period_s)));
        }
        if self.nodes.is_empty() {
            return Err(invalid("case has no nodes"));
        }
        let mut node_ids = BTreeSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id.as_str()) {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
            if n.load_mw.len() != self.horizon {
                return Err(invalid(format!(
                    "node {}: load_mw has {} entries, horizon is {}",
                    n.id,
                    n.load_mw.len(),
                    self.horizon
                )));
            }
            for v in &n.load_mw {
                finite(&format!("node {} load_mw", n.id), *v)?;
            }
        }
        if !node_ids.contains(self.slack.as_str()) {
            return Err(invalid(format!("slack {} is not a node", self.slack)));
        }
        let mut edge_ids = BTreeSet::new();
        for e in &self.edges {
            if !edge_ids.insert(e.id.as_str()) {
                return Err(invalid(format!("duplicate edge id {}", e.id)));
            }
            for end in [&e.from, &e.to] {
                if !node_ids.contains(end.as_str()) {
                    return Err(invalid(format!("edge {}: unknown node {end}", e.id)));
                }
            }
            if e.from == e.to {
                return Err(invalid(format!("edge {}: from and to are the same node", e.id)));
            }
            if !(e.susceptance.is_finite() && e.susceptance > 0.0) {
                return Err(invalid(format!(
                    "edge {}: susceptance must be > 0, got {}",
                    e.id, e.susceptance
                )));
            }
            if !(e.static_rating_mw.is_finite() && e.static_rating_mw > 0.0) {
                return Err(invalid(format!(
                    "edge {}: static_rating_mw must be > 0, got {}",
                    e.id, e.static_rating_mw
                )));
            }
            if let Some(c) = &e.conductor {
                let spec = self
                    .conductors
                    .get(c)
                    .ok_or_else(|| invalid(format!("edge {}: unknown conductor {c}", e.id)))?;
                spec.validate()
                    .map_err(|err| invalid(format!("conductor {c}: {err}")))?;
            }
            if let Some(t) = e.initial_temp_c {
                finite(&format!("edge {} initial_temp_c", e.id), t)?;
            }
        }
        let mut gen_ids = BTreeSet::new();
        for g in &self.generators {
            if !gen_ids.insert(g.id.as_str()) {
                return Err(invalid(format!("duplicate generator id {}", g.id)));
            }
            if !node_ids.contains(g.node.as_str()) {
                return Err(invalid(format!("generator {}: unknown node {}", g.id, g.node)));
            }
            for (name, v) in [
                ("c1", g.c1),
                ("c2", g.c2),
                ("p_min", g.p_min),
                ("p_max", g.p_max),
                ("ramp_up", g.ramp_up),
                ("ramp_dn", g.ramp_dn),
                ("emission_rate", g.emission_rate),
            ] {
                finite(&format!("generator {} {name}", g.id), v)?;
            }
            if g.p_min > g.p_max {
                return Err(invalid(format!(
                    "generator {}: p_min {} exceeds p_max {}",
                    g.id, g.p_min, g.p_max
                )));
            }
            if g.ramp_up < 0.0 || g.ramp_dn < 0.0 {
                return Err(invalid(format!("generator {}: ramps must be >= 0", g.id)));
            }
            if g.c2 < 0.0 {
                return Err(invalid(format!("generator {}: c2 must be >= 0", g.id)));
            }
            if g.emission_rate < 0.0 {
                return Err(invalid(format!("generator {}: emission_rate must be >= 0", g.id)));
            }
        }
        let mut farm_ids = BTreeSet::new();
        for w in &self.wind_farms {
            if !farm_ids.insert(w.id.as_str()) {
                return Err(invalid(format!("duplicate wind farm id {}", w.id)));
            }
            if !node_ids.contains(w.node.as_str()) {
                return Err(invalid(format!("wind farm {}: unknown node {}", w.id, w.node)));
            }
            if !(w.swept_area_m2.is_finite() && w.swept_area_m2 > 0.0) {
                return Err(invalid(format!("wind farm {}: swept_area_m2 must be > 0", w.id)));
            }
            if let Some(f) = &w.forecast_mw {
                if f.len() != self.horizon {
                    return Err(invalid(format!(
                        "wind farm {}: forecast_mw has {} entries, horizon is {}",
                        w.id,
                        f.len(),
                        self.horizon
                    )));
                }
                if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid(format!("wind farm {}: forecast_mw must be >= 0", w.id)));
                }
            }
            if let Some(c) = w.capacity_mw {
                if !(c.is_finite() && c > 0.0) {
                    return Err(invalid(format!("wind farm {}: capacity_mw must be > 0", w.id)));
                }
            }
        }
        for (site, series) in &self.weather {
            if series.len() != self.horizon {
                return Err(invalid(format!(
                    "weather site {site}: {} samples, horizon is {}",
                    series.len(),
                    self.horizon
                )));
            }
            for s in series {
                s.validate().map_err(|e| invalid(format!("weather site {site}: {e}")))?;
            }
        }
        if let Some(ae) = &self.ambient_errors {
            validate_ambient_errors(ae)?;
        }
        for (line, s) in &self.rating_error_std_mw {
            if !edge_ids.contains(line.as_str()) {
                return Err(invalid(format!("rating_error_std_mw: unknown edge {line}")));
            }
            if !(s.is_finite() && *s >= 0.0) {
                return Err(invalid(format!("rating_error_std_mw[{line}] must be >= 0")));
            }
        }
        if !self.is_connected() {
            return Err(invalid("network is not connected"));
        }
        Ok(())
    }

    /// Checks that every site needed by a dynamic line or a derived wind
    /// forecast has weather.
    pub fn validate_weather(&self) -> Result<()> {
        for e in self.edges.iter().filter(|e| e.is_dynamic()) {
            let site = e.site.as_deref().unwrap_or_default();
            if !self.weather.contains_key(site) {
                return Err(invalid(format!("edge {}: no weather for site {site}", e.id)));
            }
        }
        for w in &self.wind_farms {
            if !self.weather.contains_key(&w.site) {
                return Err(invalid(format!("wind farm {}: no weather for site {}", w.id, w.site)));
            }
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let idx = self.node_map();
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (a, b) = (idx[e.from.as_str()], idx[e.to.as_str()]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().all(|s| *s)
    }

    /// Node id to position.
    pub fn node_map(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.node_index(&self.slack).expect("validated slack")
    }

    /// Node position of every generator.
    pub fn generator_nodes(&self) -> Vec<usize> {
        let idx = self.node_map();
        self.generators.iter().map(|g| idx[g.node.as_str()]).collect()
    }

    /// Node position of every wind farm.
    pub fn wind_nodes(&self) -> Vec<usize> {
        let idx = self.node_map();
        self.wind_farms.iter().map(|w| idx[w.node.as_str()]).collect()
    }

    /// Conductor and weather sample of a dynamic line in period `t`.
    pub fn line_conditions(&self, edge: usize, t: usize) -> Result<Option<(&ConductorSpec, WeatherSample)>> {
        let e = &self.edges[edge];
        let (Some(c), Some(site)) = (&e.conductor, &e.site) else {
            return Ok(None);
        };
        let spec = &self.conductors[c];
        let series = self
            .weather
            .get(site)
            .ok_or_else(|| invalid(format!("edge {}: no weather for site {site}", e.id)))?;
        Ok(Some((spec, series[t])))
    }

    /// Weather at a site in period `t`.
    pub fn site_weather(&self, site: &str, t: usize) -> Result<WeatherSample> {
        self.weather
            .get(site)
            .map(|s| s[t])
            .ok_or_else(|| invalid(format!("no weather for site {site}")))
    }

    /// Wind forecast of every farm in period `t`, MW.
    pub fn wind_forecast(&self, t: usize) -> Result<Vec<f64>> {
        self.wind_farms
            .iter()
            .map(|w| match &w.forecast_mw {
                Some(f) => Ok(f[t]),
                None => {
                    let s = self.site_weather(&w.site, t)?;
                    let p = crate::uncertainty::wind_power(s.air_density_kg_m3, w.swept_area_m2, s.wind_speed_m_s);
                    Ok(w.capacity_mw.map_or(p, |c| p.min(c)))
                }
            })
            .collect()
    }

    /// Nodal load vector in period `t`.
    pub fn loads(&self, t: usize) -> Vec<f64> {
        self.nodes.iter().map(|n| n.load_mw[t]).collect()
    }

    /// Replaces the case weather with `series`. A `"*"` entry applies to every
    /// site referenced by the case that has no explicit series.
    pub fn attach_weather(&mut self, series: BTreeMap<String, Vec<WeatherSample>>) -> Result<()> {
        let mut out = BTreeMap::new();
        let wildcard = series.get("*").cloned();
        for (site, s) in series {
            if site != "*" {
                out.insert(site, s);
            }
        }
        if let Some(all) = wildcard {
            for site in self.referenced_sites() {
                out.entry(site).or_insert_with(|| all.clone());
            }
        }
        for (site, s) in out.iter_mut() {
            if s.len() < self.horizon {
                return Err(invalid(format!(
                    "weather site {site}: {} samples, horizon is {}",
                    s.len(),
                    self.horizon
                )));
            }
            s.truncate(self.horizon);
        }
        self.weather = out;
        self.validate()
    }

    /// Every weather site named by lines, wind farms or the error model.
    pub fn referenced_sites(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self.edges.iter().filter_map(|e| e.site.clone()).collect();
        s.extend(self.wind_farms.iter().map(|w| w.site.clone()));
        if let Some(ae) = &self.ambient_errors {
            s.extend(ae.sites.iter().cloned());
        }
        s
    }

    /// Initial conductor temperature of a dynamic line: the case value, or the
    /// steady temperature at zero current under the first-period weather.
    pub fn initial_temperature(&self, edge: usize) -> Result<Option<f64>> {
        if let Some(t) = self.edges[edge].initial_temp_c {
            return Ok(Some(t));
        }
        match self.line_conditions(edge, 0)? {
            Some((spec, w)) => Ok(Some(crate::thermal::steady_state_temperature(spec, &w, 0.0)?)),
            None => Ok(None),
        }
    }
}

fn validate_ambient_errors(ae: &AmbientErrors) -> Result<()> {
    let n = ae.sites.len();
    if n == 0 {
        return Err(invalid("ambient_errors.sites is empty"));
    }
    if ae.std.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(invalid("ambient_errors.std entries must be >= 0"));
    }
    if let Some(c) = &ae.within_site_correlation {
        check_correlation("ambient_errors.within_site_correlation", &c.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 3)?;
    }
    if let Some(c) = &ae.cross_site_correlation {
        check_correlation("ambient_errors.cross_site_correlation", c, n)?;
    }
    if let Some(d) = &ae.dense_covariance {
        if d.len() != 3 * n || d.iter().any(|r| r.len() != 3 * n) {
            return Err(invalid(format!(
                "ambient_errors.dense_covariance must be {0}x{0}",
                3 * n
            )));
        }
        for i in 0..3 * n {
            for j in 0..3 * n {
                finite("ambient_errors.dense_covariance", d[i][j])?;
                if (d[i][j] - d[j][i]).abs() > 1e-12 * (1.0 + d[i][j].abs()) {
                    return Err(invalid("ambient_errors.dense_covariance is not symmetric"));
                }
            }
        }
    }
    Ok(())
}

fn check_correlation(name: &str, c: &[Vec<f64>], n: usize) -> Result<()> {
    if c.len() != n || c.iter().any(|r| r.len() != n) {
        return Err(invalid(format!("{name} must be {n}x{n}")));
    }
    for i in 0..n {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("{name} must have a unit diagonal")));
        }
        for j in 0..n {
            if !c[i][j].is_finite() || c[i][j].abs() > 1.0 || (c[i][j] - c[j][i]).abs() > 1e-12 {
                return Err(invalid(format!("{name} must be symmetric with entries in [-1, 1]")));
            }
        }
    }
    Ok(())
}

/// Reads and validates a JSON case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<SystemCase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SystemCase::from_json(&text)
}

#[derive(Debug, Deserialize)]
struct WeatherRow {
    #[serde(default)]
    site: Option<String>,
    #[allow(dead_code)]
    timestamp: String,
    wind_speed_m_s: f64,
    wind_dir_deg: f64,
    #[serde(rename = "ambient_C")]
    ambient_c: f64,
    #[serde(rename = "solar_W_m2")]
    solar_w_m2: f64,
    air_density: f64,
}

/// Reads a weather CSV with columns `timestamp, wind_speed_m_s, wind_dir_deg,
/// ambient_C, solar_W_m2, air_density` and an optional leading `site`
/// column. Rows without a site are returned under the `"*"` key.
pub fn load_weather_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<WeatherSample>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weather_csv(file)
}

pub fn read_weather_csv<R: std::io::Read>(reader: R) -> Result<BTreeMap<String, Vec<WeatherSample>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: BTreeMap<String, Vec<WeatherSample>> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<WeatherRow>().enumerate() {
        let row = row.map_err(|e| Error::Schema(format!("weather row {}: {e}", line + 1)))?;
        let sample = WeatherSample {
            wind_speed_m_s: row.wind_speed_m_s,
            wind_direction_deg: row.wind_dir_deg,
            ambient_temp_c: row.ambient_c,
            solar_radiation_w_m2: row.solar_w_m2,
            air_density_kg_m3: row.air_density,
        };
        sample
            .validate()
            .map_err(|e| Error::Validation(format!("weather row {}: {e}", line + 1)))?;
        out.entry(row.site.unwrap_or_else(|| "*".into())).or_default().push(sample);
    }
    Ok(out)
}

/// Power transfer distribution factors, edges × nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PtdfMatrix {
    pub s: DMatrix<f64>,
    pub slack: usize,
}

impl PtdfMatrix {
    pub fn n_edges(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.s.ncols()
    }

    pub fn get(&self, e: usize, i: usize) -> f64 {
        self.s[(e, i)]
    }
}

/// PTDF of the case with respect to its slack node.
pub fn ptdf(case: &SystemCase) -> Result<PtdfMatrix> {
    let n = case.nodes.len();
    let m = case.edges.len();
    let idx = case.node_map();
    let slack = idx
        .get(case.slack.as_str())
        .copied()
        .ok_or_else(|| Error::SingularNetwork(format!("slack {} not found", case.slack)))?;
    if !case.is_connected() {
        return Err(Error::SingularNetwork("network is not connected".into()));
    }
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut ends = Vec::with_capacity(m);
    for e in &case.edges {
        let (f, t) = (idx[e.from.as_str()], idx[e.to.as_str()]);
        let y = e.susceptance;
        b[(f, f)] += y;
        b[(t, t)] += y;
        b[(f, t)] -= y;
        b[(t, f)] -= y;
        ends.push((f, t, y));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mut s = DMatrix::<f64>::zeros(m, n);
    if keep.is_empty() {
        return Ok(PtdfMatrix { s, slack });
    }
    let reduced = b.select_rows(&keep).select_columns(&keep);
    let x = reduced
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| reduced.try_inverse())
        .ok_or_else(|| Error::SingularNetwork("reduced susceptance matrix is singular".into()))?;
    let mut pos = vec![None; n];
    for (k, &i) in keep.iter().enumerate() {
        pos[i] = Some(k);
    }
    for (e, &(f, t, y)) in ends.iter().enumerate() {
        for (k, _) in keep.iter().enumerate() {
            let xf = pos[f].map_or(0.0, |r| x[(r, k)]);
            let xt = pos[t].map_or(0.0, |r| x[(r, k)]);
            s[(e, keep[k])] = y * (xf - xt);
        }
    }
    Ok(PtdfMatrix { s, slack })
}

/// Line flows from nodal net injections, MW.
pub fn nodal_flows(s: &PtdfMatrix, injections: &[f64]) -> Result<Vec<f64>> {
    if injections.len() != s.n_nodes() {
        return Err(Error::IndexMismatch(format!(
            "{} injections for {} nodes",
            injections.len(),
            s.n_nodes()
        )));
    }
    let net: f64 = injections.iter().sum();
    if net.abs() > 1e-6 {
        return Err(Error::UnbalancedInjection(net));
    }
    let v = DVector::from_column_slice(injections);
    Ok((&s.s * v).iter().copied().collect())
}

/// Builds a case from MATPOWER `bus`, `gen`, `branch` and `gencost` tables.
///
/// Only topology, loads, limits and polynomial costs are imported; every
/// branch is static (no conductor or weather), loads are repeated over
/// `horizon` periods and ramp limits default to `p_max` when absent.
pub fn import_matpower(text: &str, horizon: usize, period_s: f64) -> Result<SystemCase> {
    let base_mva = matpower_scalar(text, "baseMVA").unwrap_or(100.0);
    let bus = matpower_table(text, "bus")?;
    let gen = matpower_table(text, "gen")?;
    let branch = matpower_table(text, "branch")?;
    let gencost = matpower_table(text, "gencost").unwrap_or_default();
    let need = |rows: &[Vec<f64>], cols: usize, name: &str| -> Result<()> {
        match rows.iter().find(|r| r.len() < cols) {
            Some(_) => Err(Error::Schema(format!("mpc.{name} rows need at least {cols} columns"))),
            None => Ok(()),
        }
    };
    need(&bus, 3, "bus")?;
    need(&gen, 10, "gen")?;
    need(&branch, 6, "branch")?;

    let id = |v: f64| format!("{}", v as i64);
    let nodes: Vec<Node> = bus
        .iter()
        .map(|r| Node { id: id(r[0]), load_mw: vec![r[2]; horizon] })
        .collect();
    let slack = bus
        .iter()
        .find(|r| r[1] as i64 == 3)
        .map(|r| id(r[0]))
        .unwrap_or_else(|| nodes[0].id.clone());
    let edges = branch
        .iter()
        .enumerate()
        .filter(|(_, r)| r.len() < 11 || r[10] != 0.0)
        .map(|(k, r)| {
            if r[3] == 0.0 {
                return Err(Error::Schema(format!("mpc.branch row {}: zero reactance", k + 1)));
            }
            Ok(Edge {
                id: format!("br{}", k + 1),
                from: id(r[0]),
                to: id(r[1]),
                susceptance: base_mva / r[3].abs(),
                static_rating_mw: if r[5] > 0.0 { r[5] } else { UNLIMITED_RATING_MW },
                conductor: None,
                site: None,
                initial_temp_c: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let generators = gen
        .iter()
        .enumerate()
        .filter(|(_, r)| r[7] > 0.0)
        .map(|(k, r)| {
            let (c2, c1) = gencost
                .get(k)
                .and_then(|c| polynomial_cost(c))
                .unwrap_or((0.0, 0.0));
            let ramp = r.get(16).copied().filter(|v| *v > 0.0).unwrap_or(r[8]);
            Generator {
                id: format!("g{}", k + 1),
                node: id(r[0]),
                c1,
                c2,
                p_min: r[9],
                p_max: r[8],
                ramp_up: ramp,
                ramp_dn: ramp,
                emission_rate: 0.0,
            }
        })
        .collect();
    let case = SystemCase {
        schema_version: SCHEMA_VERSION,
        name: "matpower".into(),
        horizon,
        period_s,
        slack,
        nodes,
        edges,
        generators,
        wind_farms: Vec::new(),
        conductors: BTreeMap::new(),
        weather: BTreeMap::new(),
        ambient_errors: None,
        rating_error_std_mw: BTreeMap::new(),
    };
    case.validate()?;
    Ok(case)
}

/// `(c2, c1)` of a polynomial `gencost` row (model 2).
fn polynomial_cost(row: &[f64]) -> Option<(f64, f64)> {
    if row.len() < 4 || row[0] as i64 != 2 {
        return None;
    }
    let n = row[3] as usize;
    let coeffs = row.get(4..4 + n)?;
    match n {
        0 => Some((0.0, 0.0)),
        1 => Some((0.0, 0.0)),
        2 => Some((0.0, coeffs[0])),
        _ => Some((coeffs[n - 3], coeffs[n - 2])),
    }
}

fn matpower_scalar(text: &str, name: &str) -> Option<f64> {
    let key = format!("mpc.{name}");
    let start = text.find(&key)? + key.len();
    let rest = text[start..].trim_start().strip_prefix('=')?;
    let end = rest.find(';')?;
    rest[..end].trim().parse().ok()
}

fn matpower_table(text: &str, name: &str) -> Result<Vec<Vec<f64>>> {
    let key = format!("mpc.{name}");
    let mut search = 0;
    let body = loop {
        let pos = text[search..]
            .find(&key)
            .map(|p| p + search)
            .ok_or_else(|| Error::Schema(format!("mpc.{name} not found")))?;
        let after = text[pos + key.len()..].trim_start();
        if let Some(rest) = after.strip_prefix('=') {
            let open = rest
                .find('[')
                .ok_or_else(|| Error::Schema(format!("mpc.{name}: missing '['")))?;
            let close = rest[open..]
                .find(']')
                .ok_or_else(|| Error::Schema(format!("mpc.{name}: missing ']'")))?;
            break &rest[open + 1..open + close];
        }
        search = pos + key.len();
    };
    let mut rows = Vec::new();
    for raw in body.lines() {
        let line = raw.split('%').next().unwrap_or("");
        for chunk in line.split(';') {
            let vals: Vec<f64> = chunk
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Schema(format!("mpc.{name}: bad number {s:?}")))
                })
                .collect::<Result<_>>()?;
            if !vals.is_empty() {
                rows.push(vals);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn edge(id: &str, from: &str, to: &str, b: f64) -> Edge {
        Edge {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            susceptance: b,
            static_rating_mw: 100.0,
            conductor: None,
            site: None,
            initial_temp_c: None,
        }
    }

    fn case_with(nodes: &[&str], edges: Vec<Edge>, slack: &str) -> SystemCase {
        SystemCase {
            schema_version: SCHEMA_VERSION,
            name: "t".into(),
            horizon: 1,
            period_s: 900.0,
            slack: slack.into(),
            nodes: nodes.iter().map(|n| Node { id: n.to_string(), load_mw: vec![0.0] }).collect(),
            edges,
            generators: vec![],
            wind_farms: vec![],
            conductors: BTreeMap::new(),
            weather: BTreeMap::new(),
            ambient_errors: None,
            rating_error_std_mw: BTreeMap::new(),
        }
    }

    #[test]
    fn single_line_ptdf() {
        let c = case_with(&["n1", "n2"], vec![edge("l", "n1", "n2", 10.0)], "n2");
        let s = ptdf(&c).unwrap();
        assert_relative_eq!(s.get(0, 0), 1.0, epsilon = 1e-12);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn ring_splits_two_thirds_one_third() {
        let c = case_with(
            &["n1", "n2", "n3"],
            vec![edge("l12", "n1", "n2", 5.0), edge("l23", "n2", "n3", 5.0), edge("l13", "n1", "n3", 5.0)],
            "n3",
        );
        let s = ptdf(&c).unwrap();
        assert_relative_eq!(s.get(2, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.get(0, 0), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.get(1, 0), 1.0 / 3.0, epsilon = 1e-12);
        for e in 0..3 {
            assert_eq!(s.get(e, 2), 0.0);
        }
    }

    #[test]
    fn disconnected_network_is_singular() {
        let mut c = case_with(&["a", "b", "c"], vec![edge("l", "a", "b", 1.0)], "a");
        assert!(matches!(ptdf(&c), Err(Error::SingularNetwork(_))));
        c.edges.push(edge("m", "b", "c", 1.0));
        assert!(ptdf(&c).is_ok());
    }

    #[test]
    fn flows_require_balance() {
        let c = case_with(&["n1", "n2"], vec![edge("l", "n1", "n2", 10.0)], "n2");
        let s = ptdf(&c).unwrap();
        assert_eq!(nodal_flows(&s, &[0.0, 0.0]).unwrap(), vec![0.0]);
        assert_relative_eq!(nodal_flows(&s, &[30.0, -30.0]).unwrap()[0], 30.0, epsilon = 1e-12);
        assert!(matches!(nodal_flows(&s, &[1.0, 0.0]), Err(Error::UnbalancedInjection(_))));
    }

    #[test]
    fn matpower_tables_import() {
        let text = r#"
function mpc = case3
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	50	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	60	0	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	80	0	0	0	1	100	1	200	0;
	2	30	0	0	0	1	100	1	100	10;
];
mpc.branch = [
	1	2	0	0.1	0	90	0	0	0	0	1	-360	360;
	2	3	0	0.2	0	0	0	0	0	0	1	-360	360;
	1	3	0	0.1	0	90	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	10	0;
	2	0	0	3	0.02	20	0;
];
"#;
        let c = import_matpower(text, 2, 3600.0).unwrap();
        assert_eq!(c.nodes.len(), 3);
        assert_eq!(c.slack, "1");
        assert_eq!(c.nodes[2].load_mw, vec![60.0, 60.0]);
        assert_relative_eq!(c.edges[0].susceptance, 1000.0);
        assert_eq!(c.edges[1].static_rating_mw, UNLIMITED_RATING_MW);
        assert_eq!((c.generators[1].c2, c.generators[1].c1), (0.02, 20.0));
        assert_eq!(c.generators[1].p_min, 10.0);
        assert_eq!(c.generators[0].ramp_up, 200.0);
        assert!(ptdf(&c).is_ok());
    }

    #[test]
    fn weather_csv_with_and_without_site() {
        let with_site = "site,timestamp,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\n\
                         a,t0,3,90,20,500,1.2\nb,t0,4,45,21,600,1.1\na,t1,5,90,22,0,1.2\n";
        let m = read_weather_csv(with_site.as_bytes()).unwrap();
        assert_eq!(m["a"].len(), 2);
        assert_eq!(m["b"][0].wind_direction_deg, 45.0);
        let plain = "timestamp,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\nt0,3,90,20,500,1.2\n";
        let m = read_weather_csv(plain.as_bytes()).unwrap();
        assert_eq!(m["*"][0].solar_radiation_w_m2, 500.0);
        let bad = "timestamp,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\nt0,-3,90,20,500,1.2\n";
        assert!(matches!(read_weather_csv(bad.as_bytes()), Err(Error::Validation(_))));
    }

    fn random_ring() -> impl Strategy<Value = (SystemCase, Vec<f64>, Vec<f64>)> {
        (3usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(0.5f64..20.0, n + 2),
                prop::collection::vec(-50.0f64..50.0, n),
                prop::collection::vec(-50.0f64..50.0, n),
                0..n,
            )
                .prop_map(move |(b, x, y, slack)| {
                    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
                    let mut edges: Vec<Edge> = (0..n)
                        .map(|i| edge(&format!("r{i}"), &ids[i], &ids[(i + 1) % n], b[i]))
                        .collect();
                    edges.push(edge("c0", &ids[0], &ids[n / 2], b[n]));
                    edges.push(edge("c1", &ids[1], &ids[n - 1], b[n + 1]));
                    let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
                    let c = case_with(&refs, edges, &ids[slack]);
                    let balance = |mut v: Vec<f64>| {
                        let m = v.iter().sum::<f64>() / v.len() as f64;
                        v.iter_mut().for_each(|z| *z -= m);
                        v
                    };
                    (c, balance(x), balance(y))
                })
        })
    }

    /// Direct DC power flow: solve the reduced nodal system for angles.
    fn dc_flows(c: &SystemCase, inj: &[f64]) -> Vec<f64> {
        let n = c.nodes.len();
        let idx = c.node_map();
        let slack = c.slack_index();
        let mut b = DMatrix::<f64>::zeros(n, n);
        for e in &c.edges {
            let (f, t) = (idx[e.from.as_str()], idx[e.to.as_str()]);
            b[(f, f)] += e.susceptance;
            b[(t, t)] += e.susceptance;
            b[(f, t)] -= e.susceptance;
            b[(t, f)] -= e.susceptance;
        }
        b.row_mut(slack).fill(0.0);
        b[(slack, slack)] = 1.0;
        let mut rhs = DVector::from_column_slice(inj);
        rhs[slack] = 0.0;
        let theta = b.lu().solve(&rhs).unwrap();
        c.edges
            .iter()
            .map(|e| e.susceptance * (theta[idx[e.from.as_str()]] - theta[idx[e.to.as_str()]]))
            .collect()
    }

    proptest! {
        #[test]
        fn ptdf_matches_direct_solve_and_is_linear((c, x, y) in random_ring(), shift in -20.0f64..20.0) {
            let s = ptdf(&c).unwrap();
            for e in 0..s.n_edges() {
                prop_assert_eq!(s.get(e, s.slack), 0.0);
            }
            let fx = nodal_flows(&s, &x).unwrap();
            let direct = dc_flows(&c, &x);
            for (a, b) in fx.iter().zip(&direct) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let fy = nodal_flows(&s, &y).unwrap();
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let fs = nodal_flows(&s, &sum).unwrap();
            for k in 0..fs.len() {
                prop_assert!((fs[k] - fx[k] - fy[k]).abs() <= 1e-9 * (1.0 + fs[k].abs()));
            }
            let shifted = DVector::from_iterator(x.len(), x.iter().map(|v| v + shift));
            let fsh = &s.s * shifted;
            let row_sums: Vec<f64> = s.s.row_iter().map(|r| r.sum()).collect();
            for k in 0..fx.len() {
                prop_assert!((fsh[k] - fx[k] - shift * row_sums[k]).abs() <= 1e-9 * (1.0 + fx[k].abs()));
            }
            let mut other = c.clone();
            other.slack = c.nodes[(c.slack_index() + 1) % c.nodes.len()].id.clone();
            let s2 = ptdf(&other).unwrap();
            let fx2 = nodal_flows(&s2, &x).unwrap();
            for k in 0..fx.len() {
                prop_assert!((fx2[k] - fx[k]).abs() <= 1e-9 * (1.0 + fx[k].abs()));
            }
        }
    }
}
