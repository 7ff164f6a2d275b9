//! Run and compare market clearings and write plot-ready artifacts.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dlrm_core::analysis::{self, LmeReport, ValidationReport};
use dlrm_core::error::{Error, Result};
use dlrm_core::grid::{load_case, load_weather_csv, SystemCase};
use dlrm_core::market_multi::{successive_linearization, MultiPeriodConfig, MAX_ITERATIONS};
use dlrm_core::market_single::{build_single, solve_built_single, RatingMode, SinglePeriodConfig};
use dlrm_core::uncertainty::case_covariances;

/// Version of the `summary.json` layout.
pub const SUMMARY_VERSION: u32 = 1;
/// Default Monte-Carlo sample count of `--validate`.
pub const DEFAULT_SAMPLES: usize = 20_000;

/// Clearing horizon: independent single-period clearings per period, or one
/// coupled multi-period clearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub case: PathBuf,
    pub weather: Option<PathBuf>,
    pub modes: Vec<RatingMode>,
    pub horizon: Horizon,
    pub epsilon: f64,
    pub out: PathBuf,
    pub seed: u64,
    pub validate: bool,
    pub samples: usize,
    pub max_iterations: usize,
}

impl RunConfig {
    pub fn new(case: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            case: case.into(),
            weather: None,
            modes: RatingMode::ALL.to_vec(),
            horizon: Horizon::Single,
            epsilon: 0.05,
            out: out.into(),
            seed: 42,
            validate: false,
            samples: DEFAULT_SAMPLES,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

/// Headline numbers of one clearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RatingMode,
    pub objective: f64,
    /// Expected generation cost, $.
    pub cost: f64,
    /// Forecast generator emissions, t.
    pub emissions_t: f64,
    /// Relative to the SLR clearing of the same run, %.
    pub cost_delta_pct_vs_slr: Option<f64>,
    pub emissions_delta_pct_vs_slr: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub stationarity: f64,
    pub equilibrium_max_gap: f64,
    pub max_violation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub case: String,
    pub periods: usize,
    pub horizon: Horizon,
    pub epsilon: f64,
    pub seed: u64,
    pub validated: bool,
    pub runs: Vec<RunSummary>,
}

/// Per-mode clearing in a period-indexed layout shared by both horizons.
struct Outcome {
    mode: RatingMode,
    objective: f64,
    cost: f64,
    p: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    r_up: Vec<Vec<f64>>,
    r_dn: Vec<Vec<f64>>,
    flows: Vec<Vec<f64>>,
    limits: Vec<Vec<Option<f64>>>,
    /// `[e]`, end-of-period temperatures `T_1..T_T`.
    temperatures: Vec<Option<Vec<f64>>>,
    thermal_reserves: Vec<Option<Vec<f64>>>,
    lmp: Vec<Vec<f64>>,
    lmrp: Vec<Vec<f64>>,
    tau_alpha: Vec<Vec<f64>>,
    lme: LmeReport,
    duals: Value,
    validation: Vec<ValidationReport>,
    converged: bool,
    iterations: usize,
    stationarity: f64,
    equilibrium_max_gap: f64,
}

/// Reads the case and, when given, replaces its weather with the CSV series.
pub fn load_inputs(case: &Path, weather: Option<&Path>) -> Result<SystemCase> {
    let mut c = load_case(case)?;
    if let Some(w) = weather {
        c.attach_weather(load_weather_csv(w)?)?;
    }
    Ok(c)
}

fn clear(case: &SystemCase, cfg: &RunConfig, mode: RatingMode) -> Result<Outcome> {
    let jcs = case_covariances(case)?;
    match cfg.horizon {
        Horizon::Multi => {
            let mcfg = MultiPeriodConfig { max_iterations: cfg.max_iterations, ..MultiPeriodConfig::new(cfg.epsilon, mode) };
            let o = successive_linearization(case, &jcs, &mcfg)?;
            let eq = analysis::equilibrium_multi(case, &o.result)?;
            let lme = analysis::lme_multi(case, &jcs, &o)?;
            let validation = if cfg.validate {
                vec![analysis::monte_carlo_multi(case, &jcs, &o, cfg.samples, cfg.seed)?]
            } else {
                vec![]
            };
            let r = o.result;
            Ok(Outcome {
                mode,
                objective: r.objective,
                cost: r.cost,
                lmrp: r.prices.lmrp.iter().map(|row| row.iter().map(|x| x.from_reserve_duals).collect()).collect(),
                tau_alpha: r.prices.lmrp.iter().map(|row| row.iter().map(|x| x.tau_alpha).collect()).collect(),
                lmp: r.prices.lmp,
                temperatures: r.temperatures.into_iter().map(|t| t.map(|v| v[1..].to_vec())).collect(),
                thermal_reserves: r.thermal_reserves.into_iter().map(|t| t.map(|v| v[1..].to_vec())).collect(),
                limits: r.limits,
                p: r.p,
                alpha: r.alpha,
                r_up: r.r_up,
                r_dn: r.r_dn,
                flows: r.flows,
                lme,
                duals: serde_json::to_value(&r.duals)?,
                validation,
                converged: r.converged,
                iterations: r.iterations.len(),
                stationarity: r.stationarity,
                equilibrium_max_gap: eq.max_relative_gap,
            })
        }
        Horizon::Single => {
            let n_e = case.edges.len();
            let mut out = Outcome {
                mode,
                objective: 0.0,
                cost: 0.0,
                p: vec![],
                alpha: vec![],
                r_up: vec![],
                r_dn: vec![],
                flows: vec![],
                limits: vec![],
                temperatures: vec![None; n_e],
                thermal_reserves: vec![None; n_e],
                lmp: vec![],
                lmrp: vec![],
                tau_alpha: vec![],
                lme: LmeReport { entries: vec![] },
                duals: Value::Null,
                validation: vec![],
                converged: true,
                iterations: 1,
                stationarity: 0.0,
                equilibrium_max_gap: f64::NEG_INFINITY,
            };
            let mut duals = Vec::new();
            for t in 0..case.horizon {
                let scfg = SinglePeriodConfig { period: t, ..SinglePeriodConfig::new(cfg.epsilon, mode) };
                let sp = build_single(case, &jcs[t], &scfg)?;
                let r = solve_built_single(case, &sp)?;
                let eq = analysis::equilibrium_single(case, &r)?;
                out.lme.entries.extend(analysis::lme_single(case, &sp, &jcs[t], &r)?.entries);
                if cfg.validate {
                    out.validation.push(analysis::monte_carlo_single(case, &jcs[t], &r, cfg.samples, cfg.seed)?);
                }
                out.objective += r.objective;
                out.cost += r.cost;
                out.stationarity = out.stationarity.max(r.stationarity);
                out.equilibrium_max_gap = out.equilibrium_max_gap.max(eq.max_relative_gap);
                out.lmrp.push(r.prices.lmrp.iter().map(|x| x.from_reserve_duals).collect());
                out.tau_alpha.push(r.prices.lmrp.iter().map(|x| x.tau_alpha).collect());
                out.lmp.push(r.prices.lmp);
                out.limits.push(r.ratings.into_iter().map(Some).collect());
                out.p.push(r.p);
                out.alpha.push(r.alpha);
                out.r_up.push(r.r_up);
                out.r_dn.push(r.r_dn);
                out.flows.push(r.flows);
                duals.push(r.duals);
            }
            out.duals = serde_json::to_value(&duals)?;
            Ok(out)
        }
    }
}

/// Forecast emissions of a dispatch, t: `Σ p·Δt·e` with `p` in MW, `Δt` in h
/// and `e` in kg/kWh.
pub fn emissions_t(case: &SystemCase, p: &[Vec<f64>]) -> f64 {
    let hours = case.period_s / 3600.0;
    p.iter()
        .map(|row| row.iter().zip(&case.generators).map(|(p, g)| p * hours * g.emission_rate).sum::<f64>())
        .sum()
}

fn pct(value: f64, base: f64) -> f64 {
    if base.abs() > 0.0 {
        100.0 * (value - base) / base.abs()
    } else {
        0.0
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_artifacts(case: &SystemCase, dir: &Path, outcomes: &[Outcome], summary: &Summary) -> Result<()> {
    let hours = case.period_s / 3600.0;

    let mut w = csv_writer();
    w.write_record(["mode", "period", "generator", "node", "p_mw", "alpha", "r_up_mw", "r_dn_mw", "emissions_t"])?;
    for o in outcomes {
        for (t, row) in o.p.iter().enumerate() {
            for (g, gen) in case.generators.iter().enumerate() {
                w.write_record([
                    o.mode.as_str().to_string(),
                    t.to_string(),
                    gen.id.clone(),
                    gen.node.clone(),
                    row[g].to_string(),
                    o.alpha[t][g].to_string(),
                    o.r_up[t][g].to_string(),
                    o.r_dn[t][g].to_string(),
                    (row[g] * hours * gen.emission_rate).to_string(),
                ])?;
            }
        }
    }
    finish_csv(&dir.join("dispatch.csv"), w)?;

    let mut w = csv_writer();
    w.write_record(["mode", "period", "kind", "location", "value"])?;
    for o in outcomes {
        for t in 0..o.lmp.len() {
            for (i, n) in case.nodes.iter().enumerate() {
                w.write_record([o.mode.as_str(), &t.to_string(), "lmp", &n.id, &o.lmp[t][i].to_string()])?;
            }
            for (g, gen) in case.generators.iter().enumerate() {
                w.write_record([o.mode.as_str(), &t.to_string(), "lmrp", &gen.id, &o.lmrp[t][g].to_string()])?;
                w.write_record([o.mode.as_str(), &t.to_string(), "tau_alpha", &gen.id, &o.tau_alpha[t][g].to_string()])?;
            }
        }
    }
    finish_csv(&dir.join("prices.csv"), w)?;

    let mut w = csv_writer();
    w.write_record(["mode", "period", "node", "lme_kg_per_kwh", "no_marginal_unit", "marginal_units"])?;
    for o in outcomes {
        for e in &o.lme.entries {
            let units: Vec<String> = e.marginal.iter().map(|(g, d)| format!("{g}:{d:.6}")).collect();
            w.write_record([
                o.mode.as_str().to_string(),
                e.period.to_string(),
                e.node.clone(),
                e.lme.to_string(),
                e.no_marginal_unit.to_string(),
                units.join(";"),
            ])?;
        }
    }
    finish_csv(&dir.join("emissions.csv"), w)?;

    let mut w = csv_writer();
    w.write_record(["mode", "period", "line", "flow_mw", "limit_mw", "temperature_c", "thermal_reserve_c"])?;
    for o in outcomes {
        for t in 0..o.flows.len() {
            for (e, edge) in case.edges.iter().enumerate() {
                w.write_record([
                    o.mode.as_str().to_string(),
                    t.to_string(),
                    edge.id.clone(),
                    o.flows[t][e].to_string(),
                    opt(o.limits[t][e]),
                    opt(o.temperatures[e].as_ref().map(|v| v[t])),
                    opt(o.thermal_reserves[e].as_ref().map(|v| v[t])),
                ])?;
            }
        }
    }
    finish_csv(&dir.join("thermal.csv"), w)?;

    let duals: BTreeMap<&str, &Value> = outcomes.iter().map(|o| (o.mode.as_str(), &o.duals)).collect();
    write_json(&dir.join("duals.json"), &duals)?;
    let validation: BTreeMap<&str, &Vec<ValidationReport>> =
        outcomes.iter().filter(|o| !o.validation.is_empty()).map(|o| (o.mode.as_str(), &o.validation)).collect();
    write_json(&dir.join("validation.json"), &validation)?;
    write_json(&dir.join("summary.json"), summary)
}

/// Clears the case under every requested mode and writes all artifacts to
/// `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<Summary> {
    if cfg.modes.is_empty() {
        return Err(Error::Validation("at least one rating mode is required".into()));
    }
    let case = load_inputs(&cfg.case, cfg.weather.as_deref())?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut modes = cfg.modes.clone();
    modes.dedup();
    let outcomes = modes
        .iter()
        .map(|&m| {
            log::info!("clearing {} ({:?})", m.as_str(), cfg.horizon);
            clear(&case, cfg, m)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = outcomes.iter().find(|o| o.mode == RatingMode::Slr).map(|o| (o.cost, emissions_t(&case, &o.p)));
    let runs = outcomes
        .iter()
        .map(|o| {
            let em = emissions_t(&case, &o.p);
            RunSummary {
                mode: o.mode,
                objective: o.objective,
                cost: o.cost,
                emissions_t: em,
                cost_delta_pct_vs_slr: base.map(|(c, _)| pct(o.cost, c)),
                emissions_delta_pct_vs_slr: base.map(|(_, e)| pct(em, e)),
                converged: o.converged,
                iterations: o.iterations,
                stationarity: o.stationarity,
                equilibrium_max_gap: o.equilibrium_max_gap,
                max_violation_rate: (!o.validation.is_empty())
                    .then(|| o.validation.iter().map(|v| v.max_rate).fold(0.0, f64::max)),
            }
        })
        .collect();
    let summary = Summary {
        schema_version: SUMMARY_VERSION,
        case: case.name.clone(),
        periods: case.horizon,
        horizon: cfg.horizon,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        validated: cfg.validate,
        runs,
    };
    write_artifacts(&case, &cfg.out, &outcomes, &summary)?;
    Ok(summary)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    /// `<run directory>:<mode>`.
    pub run: String,
    pub cost: f64,
    pub emissions_t: f64,
    pub cost_delta_pct: f64,
    pub emissions_delta_pct: f64,
}

/// Reads `summary.json` from a run directory.
pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s: Summary = serde_json::from_str(&text)?;
    if s.schema_version != SUMMARY_VERSION {
        return Err(Error::Schema(format!(
            "{}: summary schema_version {} (expected {SUMMARY_VERSION})",
            path.display(),
            s.schema_version
        )));
    }
    Ok(s)
}

/// Percentage deltas of cost and emissions of every clearing in `dirs`
/// against the first one. All runs must be on the same case and horizon.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    let mut runs = Vec::new();
    let mut reference: Option<(String, usize)> = None;
    for d in dirs {
        let s = read_summary(d)?;
        let key = (s.case.clone(), s.periods);
        match &reference {
            None => reference = Some(key),
            Some(r) if *r != key => {
                return Err(Error::CaseMismatch(format!(
                    "{} clears case {} over {} periods, expected {} over {}",
                    d.display(),
                    key.0,
                    key.1,
                    r.0,
                    r.1
                )))
            }
            _ => {}
        }
        for r in s.runs {
            runs.push((format!("{}:{}", d.display(), r.mode.as_str()), r.cost, r.emissions_t));
        }
    }
    if runs.len() < 2 {
        return Err(Error::Validation(format!("compare needs at least two clearings, found {}", runs.len())));
    }
    let (_, c0, e0) = runs[0].clone();
    Ok(runs
        .into_iter()
        .map(|(run, cost, em)| ComparisonRow {
            run,
            cost,
            emissions_t: em,
            cost_delta_pct: pct(cost, c0),
            emissions_delta_pct: pct(em, e0),
        })
        .collect())
}

/// Fixed-width rendering of a comparison table.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$}  {:>14}  {:>9}  {:>14}  {:>9}\n",
        "run", "cost ($)", "Δcost %", "emissions (t)", "Δemis %"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>14.2}  {:>9.3}  {:>14.4}  {:>9.3}\n",
            r.run, r.cost, r.cost_delta_pct, r.emissions_t, r.emissions_delta_pct
        ));
    }
    s
}

/// Machine-readable error report written on failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl From<&Error> for ErrorReport {
    fn from(e: &Error) -> Self {
        let path = match e {
            Error::Io { path, .. } => Some(path.display().to_string()),
            _ => None,
        };
        ErrorReport { error: e.kind().to_string(), message: e.to_string(), path }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pct_is_relative_to_base() {
        assert_eq!(pct(90.0, 100.0), -10.0);
        assert_eq!(pct(5.0, 0.0), 0.0);
    }

    #[test]
    fn error_report_names_io_path() {
        let e = Error::io("/no/such/file", std::io::Error::from(std::io::ErrorKind::NotFound));
        let r = ErrorReport::from(&e);
        assert_eq!(r.path.as_deref(), Some("/no/such/file"));
        assert_eq!(r.error, e.kind());
    }

    #[test]
    fn comparison_table_has_one_line_per_run() {
        let rows = vec![
            ComparisonRow { run: "a:slr".into(), cost: 1.0, emissions_t: 1.0, cost_delta_pct: 0.0, emissions_delta_pct: 0.0 },
            ComparisonRow { run: "a:dlr".into(), cost: 0.9, emissions_t: 1.1, cost_delta_pct: -10.0, emissions_delta_pct: 10.0 },
        ];
        assert_eq!(format_comparison(&rows).lines().count(), 3);
    }
}
