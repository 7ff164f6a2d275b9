//! Multi-period chance-constrained DC-OPF with linearized conductor
//! temperature dynamics and thermal reserves.
//!
//! Periods are `t = 0..T−1`. Line flows `f_{e,t}` and generator decisions
//! act during period `t` and move the conductor temperature from `T_{e,t}` to
//! `T_{e,t+1}`; `T_{e,0}` is given and the cap applies to `T_{e,1..T}`. The
//! nonlinear one-step map is linearized around a reference trajectory
//!
//! `T_{t+1} ≈ κ^a + κ^b·T_t + κ^c·f_t`,
//!
//! and the stochastic deviation of the temperature is bounded by the thermal
//! reserve `R^th`, with `R^th_0 = 0` and
//!
//! `δ‖[Σ_ω^{1/2}κ^c a(α_t) + Σ_ω^{−1/2}c_t; √(κ̇ᵀΣ_ςκ̇ − c_tᵀΣ_ω⁻¹c_t)]‖ ≤ R^th_{t+1} − κ^b R^th_t`,
//!
//! where `κ̇ = Σ_j ∂step/∂μ_j · γ_{μ_j}` maps ambient errors to temperature and
//! `c_t = Σ_ως κ̇`.
//!
//! Constraint tags, besides the per-period versions of the single-period
//! ones (`bal[t]`, `alpha[t]`, `pmax[g,t]`, `pmin[g,t]`, `re_up[g,t]`,
//! `re_dn[g,t]`, `lb:alpha[g,t]`, `fmax[e,t]`, `fmin[e,t]`):
//!
//! | tag            | constraint                                        |
//! |----------------|---------------------------------------------------|
//! | `ramp_up[g,t]` | `p_t − p_{t−1} + R^up_t + R^dn_{t−1} − U^up ≤ 0`  |
//! | `ramp_dn[g,t]` | `p_{t−1} − p_t + R^dn_t + R^up_{t−1} − U^dn ≤ 0`  |
//! | `flow[e,t]`    | `Σ_i S_{e,i}(p + w − d)_i − f_{e,t} = 0`          |
//! | `temp[e,t]`    | `T_{t+1} − κ^b T_t − κ^c f_t − κ^a = 0`           |
//! | `tcap[e,t]`    | `T_{t+1} + R^th_{t+1} − T^max ≤ 0`                |
//! | `rth[e,t]`     | thermal reserve cone of the step `t → t+1`        |

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::SystemCase;
use crate::market_single::{cone_q, delta_for, flow_cones, line_ratings, weakly_active, AlphaCone, NetworkData, RatingMode, TIE_BREAK};
use crate::socp::{self, ConicProgram, ConicSolution, ConstraintKind, LinExpr, Residuals};
use crate::thermal::{self, EvolutionCoefficients};
use crate::uncertainty::{require_dominance, JointCovariance};

/// Default bound on successive-linearization iterations.
pub const MAX_ITERATIONS: usize = 10;
/// Temperature consistency that stops the iteration, °C.
pub const CONVERGENCE_TOL_C: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MultiPeriodConfig {
    pub epsilon: f64,
    pub rating_mode: RatingMode,
    pub max_iterations: usize,
    pub tolerance_c: f64,
}

impl MultiPeriodConfig {
    pub fn new(epsilon: f64, rating_mode: RatingMode) -> Self {
        MultiPeriodConfig { epsilon, rating_mode, max_iterations: MAX_ITERATIONS, tolerance_c: CONVERGENCE_TOL_C }
    }
}

/// How dynamic lines are limited in a multi-period program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ThermalTreatment {
    /// Static ratings everywhere.
    Static,
    /// Steady-state weather ratings per period (reference initialization).
    Steady,
    /// Linearized temperature recursion.
    Recursion,
}

/// Linearization of one step of the temperature map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaPoint {
    /// Reference temperature `T̆_t` and flow `f̆_t`.
    pub t_ref: f64,
    pub f_ref: f64,
    /// `step(T̆_t, f̆_t)`.
    pub t_next_ref: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub kappa_c: f64,
    /// Coefficients of `μ^a..μ^d`: `[1, T̆, f̆², f̆⁴]`.
    pub kappa_mu: [f64; 4],
    /// Ambient-error to temperature map `κ̇ = Σ_j kappa_mu[j]·γ_{μ_j}`.
    #[serde(skip)]
    pub kappa_dot: DVector<f64>,
    #[serde(skip)]
    pub coefficients: Option<EvolutionCoefficients>,
}

/// Linearizations per line and period; `None` for lines without a
/// conductor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaSet {
    pub lines: Vec<Option<Vec<KappaPoint>>>,
}

/// First-order expansion of `step(T, f)` at `(t_ref, f_ref)`.
pub fn linearize_step(c: &EvolutionCoefficients, t_ref: f64, f_ref: f64) -> (f64, f64, f64) {
    let t_next = thermal::step_temperature(c, t_ref, f_ref);
    let kappa_b = c.mu_b;
    let kappa_c = 2.0 * c.mu_c * f_ref + 4.0 * c.mu_d * f_ref.powi(3);
    let kappa_a = t_next - kappa_b * t_ref - kappa_c * f_ref;
    (kappa_a, kappa_b, kappa_c)
}

/// Step-map simulation of every dynamic line under `flows[t][e]`. Returns
/// per line `T_0..T_T`.
pub fn simulate_step_map(case: &SystemCase, flows: &[Vec<f64>]) -> Result<Vec<Option<Vec<f64>>>> {
    (0..case.edges.len())
        .map(|e| {
            let Some(t0) = case.initial_temperature(e)? else { return Ok(None) };
            let mut temps = vec![t0];
            for (t, f) in flows.iter().enumerate() {
                let (spec, w) = case.line_conditions(e, t)?.expect("dynamic line");
                let c = thermal::evolution_coefficients(spec, &w, case.period_s)?;
                temps.push(thermal::step_temperature(&c, temps[t], f[e]));
            }
            Ok(Some(temps))
        })
        .collect()
}

/// Linearizes the temperature recursion of every dynamic line along the
/// step-map trajectory of `flows[t][e]`.
pub fn linearize_evolution(case: &SystemCase, jcs: &[JointCovariance], flows: &[Vec<f64>]) -> Result<KappaSet> {
    if flows.len() != case.horizon || jcs.len() != case.horizon {
        return Err(Error::IndexMismatch("reference trajectory does not span the horizon".into()));
    }
    let temps = simulate_step_map(case, flows)?;
    let lines = (0..case.edges.len())
        .map(|e| {
            let Some(tr) = &temps[e] else { return Ok(None) };
            let points = (0..case.horizon)
                .map(|t| {
                    let (spec, w) = case.line_conditions(e, t)?.expect("dynamic line");
                    let c = thermal::evolution_coefficients(spec, &w, case.period_s)?;
                    let f = flows[t][e];
                    let (ka, kb, kc) = linearize_step(&c, tr[t], f);
                    let kappa_mu = [1.0, tr[t], f * f, f.powi(4)];
                    let dim = jcs[t].sigma_varsigma.nrows();
                    let mut kappa_dot = DVector::zeros(dim);
                    if let Some(g) = &jcs[t].gamma_mu[e] {
                        for j in 0..4 {
                            kappa_dot += &g[j] * kappa_mu[j];
                        }
                    }
                    Ok(KappaPoint {
                        t_ref: tr[t],
                        f_ref: f,
                        t_next_ref: tr[t + 1],
                        kappa_a: ka,
                        kappa_b: kb,
                        kappa_c: kc,
                        kappa_mu,
                        kappa_dot,
                        coefficients: Some(c),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(points))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KappaSet { lines })
}

/// Thermal reserve cone of one step: `v(α) = Σ^{1/2}κ^c a(α) + Σ^{−1/2}c`.
pub fn thermal_cone(jc: &JointCovariance, net: &NetworkData, e: usize, k: &KappaPoint) -> Result<AlphaCone> {
    let m = jc.n_farms();
    let sw = DVector::from_vec(net.wind_ptdf(e));
    let c = jc.omega_cov_with(&k.kappa_dot);
    let (lhs, rhs) = jc.thermal_dominance(&k.kappa_dot);
    if lhs > rhs + 1e-9 * rhs.max(1e-12) {
        return Err(Error::DominanceViolated {
            line: e.to_string(),
            detail: format!("thermal: cᵀΣ⁻¹c = {lhs:.6e} exceeds κ̇ᵀΣκ̇ = {rhs:.6e}"),
        });
    }
    let base = -(&jc.sigma_omega_sqrt * sw) * k.kappa_c + &jc.sigma_omega_inv_sqrt * c;
    let ones = &jc.sigma_omega_sqrt * DVector::from_element(m, 1.0) * k.kappa_c;
    Ok(AlphaCone { base, ones, tail: (rhs - lhs).max(0.0).sqrt() })
}

/// Variable indices, `[t][g]` or `[e][t]`.
#[derive(Debug, Clone)]
pub struct MultiIndex {
    pub p: Vec<Vec<usize>>,
    pub alpha: Vec<Vec<usize>>,
    pub r_up: Vec<Vec<usize>>,
    pub r_dn: Vec<Vec<usize>>,
    /// `[t][e]`.
    pub f: Vec<Vec<usize>>,
    /// `[e][s]` for `T_{e,s+1}`, thermal lines only.
    pub temp: Vec<Option<Vec<usize>>>,
    /// `[e][s]` for `R^th_{e,s+1}`, chance-constrained thermal lines only.
    pub r_th: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct MultiProgram {
    pub program: ConicProgram,
    pub index: MultiIndex,
    pub mode: RatingMode,
    pub epsilon: f64,
    pub delta: f64,
    /// `Σ_Ω` per period.
    pub sigma_big_omega: Vec<f64>,
    /// Linear or steady limits `[t][e]`; `None` for lines under the
    /// temperature recursion.
    pub limits: Vec<Vec<Option<f64>>>,
    /// Flow cones `[t][e]` of limited lines in the chance-constrained mode.
    pub flow_cones: Vec<Vec<Option<(AlphaCone, AlphaCone)>>>,
    /// Thermal cones `[t][e]`.
    pub thermal_cones: Vec<Vec<Option<AlphaCone>>>,
    pub kappas: Option<KappaSet>,
    pub initial_temps: Vec<Option<f64>>,
    pub net: NetworkData,
    treatment: ThermalTreatment,
}

/// Builds the program under the temperature recursion linearized by
/// `kappas` (ignored in the static mode).
pub fn build_multi(case: &SystemCase, jcs: &[JointCovariance], kappas: &KappaSet, cfg: &MultiPeriodConfig) -> Result<MultiProgram> {
    let treatment = if cfg.rating_mode == RatingMode::Slr { ThermalTreatment::Static } else { ThermalTreatment::Recursion };
    let loads: Vec<Vec<f64>> = (0..case.horizon).map(|t| case.loads(t)).collect();
    build_inner(case, &NetworkData::new(case)?, jcs, Some(kappas), cfg, treatment, &loads)
}

fn build_inner(
    case: &SystemCase,
    net: &NetworkData,
    jcs: &[JointCovariance],
    kappas: Option<&KappaSet>,
    cfg: &MultiPeriodConfig,
    treatment: ThermalTreatment,
    loads: &[Vec<f64>],
) -> Result<MultiProgram> {
    let horizon = case.horizon;
    if jcs.len() != horizon || loads.len() != horizon {
        return Err(Error::IndexMismatch(format!("{} covariances for horizon {horizon}", jcs.len())));
    }
    let delta = delta_for(cfg.epsilon)?;
    let cc = cfg.rating_mode == RatingMode::CcDlr;
    let n_e = case.edges.len();
    let thermal_line: Vec<bool> = (0..n_e)
        .map(|e| treatment == ThermalTreatment::Recursion && case.edges[e].is_dynamic())
        .collect();
    if thermal_line.iter().any(|&b| b) {
        let k = kappas.ok_or_else(|| Error::Validation("temperature recursion needs a linearization".into()))?;
        if k.lines.len() != n_e {
            return Err(Error::IndexMismatch("linearization does not match the case".into()));
        }
    }
    if cc {
        let ids: Vec<String> = case.edges.iter().map(|e| e.id.clone()).collect();
        for jc in jcs {
            require_dominance(jc, &ids)?;
        }
    }
    let rating_mode = match treatment {
        ThermalTreatment::Static => RatingMode::Slr,
        _ => RatingMode::Dlr,
    };
    let mut limits = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let r = line_ratings(case, rating_mode, t)?;
        limits.push((0..n_e).map(|e| (!thermal_line[e]).then_some(r[e])).collect::<Vec<_>>());
    }
    let initial_temps: Vec<Option<f64>> =
        (0..n_e).map(|e| if thermal_line[e] { case.initial_temperature(e) } else { Ok(None) }).collect::<Result<_>>()?;

    let mut prog = ConicProgram::new();
    let n_g = case.generators.len();
    let mut index = MultiIndex {
        p: vec![],
        alpha: vec![],
        r_up: vec![],
        r_dn: vec![],
        f: vec![],
        temp: vec![None; n_e],
        r_th: vec![None; n_e],
    };
    for t in 0..horizon {
        let mut p = vec![];
        let mut a = vec![];
        let mut ru = vec![];
        let mut rd = vec![];
        for g in &case.generators {
            p.push(prog.add_var(format!("p[{},{t}]", g.id), None, None));
            a.push(prog.add_var(format!("alpha[{},{t}]", g.id), Some(0.0), None));
            ru.push(prog.add_var(format!("r_up[{},{t}]", g.id), None, None));
            rd.push(prog.add_var(format!("r_dn[{},{t}]", g.id), None, None));
        }
        index.p.push(p);
        index.alpha.push(a);
        index.r_up.push(ru);
        index.r_dn.push(rd);
        index.f.push(case.edges.iter().map(|e| prog.add_var(format!("f[{},{t}]", e.id), None, None)).collect());
    }
    for (e, edge) in case.edges.iter().enumerate() {
        if thermal_line[e] {
            index.temp[e] = Some((1..=horizon).map(|s| prog.add_var(format!("T[{},{s}]", edge.id), None, None)).collect());
            if cc {
                index.r_th[e] = Some((1..=horizon).map(|s| prog.add_var(format!("Rth[{},{s}]", edge.id), None, None)).collect());
            }
        }
    }

    let mut sigma_big_omega = Vec::with_capacity(horizon);
    let mut flow_cones_t = Vec::with_capacity(horizon);
    let mut thermal_cones_t = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let jc = &jcs[t];
        if jc.n_farms() != case.wind_farms.len() || jc.b_omega_e.len() != n_e {
            return Err(Error::IndexMismatch("covariance does not match the case".into()));
        }
        let s_omega = jc.sigma_big_omega;
        sigma_big_omega.push(s_omega);
        let reserve_coeff = s_omega.sqrt() * delta;
        for (g, u) in case.generators.iter().enumerate() {
            let (p, a, ru, rd) = (index.p[t][g], index.alpha[t][g], index.r_up[t][g], index.r_dn[t][g]);
            prog.set_cost(p, u.c1);
            prog.add_quadratic(p, if u.c2 > 0.0 { u.c2 } else { TIE_BREAK });
            prog.add_quadratic(a, u.c2 * s_omega + TIE_BREAK);
            prog.set_cost(ru, TIE_BREAK);
            prog.set_cost(rd, TIE_BREAK);
            prog.add_le(format!("pmax[{},{t}]", u.id), LinExpr::var(p).term(ru, 1.0).plus(-u.p_max));
            prog.add_le(format!("pmin[{},{t}]", u.id), LinExpr::new().term(p, -1.0).term(rd, 1.0).plus(u.p_min));
            prog.add_le(format!("re_up[{},{t}]", u.id), LinExpr::new().term(a, reserve_coeff).term(ru, -1.0));
            prog.add_le(format!("re_dn[{},{t}]", u.id), LinExpr::new().term(a, reserve_coeff).term(rd, -1.0));
            if t > 0 {
                let (p0, ru0, rd0) = (index.p[t - 1][g], index.r_up[t - 1][g], index.r_dn[t - 1][g]);
                prog.add_le(
                    format!("ramp_up[{},{t}]", u.id),
                    LinExpr::var(p).term(p0, -1.0).term(ru, 1.0).term(rd0, 1.0).plus(-u.ramp_up),
                );
                prog.add_le(
                    format!("ramp_dn[{},{t}]", u.id),
                    LinExpr::var(p0).term(p, -1.0).term(rd, 1.0).term(ru0, 1.0).plus(-u.ramp_dn),
                );
            }
        }
        let wind = case.wind_forecast(t)?;
        let fixed = net.fixed_injection(case.nodes.len(), &wind, &loads[t]);
        let mut bal = LinExpr::constant(-fixed.iter().sum::<f64>());
        for &p in &index.p[t] {
            bal.add_term(p, -1.0);
        }
        prog.add_eq(format!("bal[{t}]"), bal);
        let mut sum_alpha = LinExpr::constant(1.0);
        for &a in &index.alpha[t] {
            sum_alpha.add_term(a, -1.0);
        }
        prog.add_eq(format!("alpha[{t}]"), sum_alpha);

        let mut fc = vec![None; n_e];
        let mut tc = vec![None; n_e];
        for (e, edge) in case.edges.iter().enumerate() {
            let fv = index.f[t][e];
            prog.add_eq(format!("flow[{},{t}]", edge.id), net.flow_expr(e, &index.p[t], &fixed).term(fv, -1.0));
            let sg = net.gen_ptdf(e);
            if let Some(limit) = limits[t][e] {
                if cc {
                    let (up, dn) = flow_cones(jc, net, e)?;
                    prog.add_soc(format!("fmax[{},{t}]", edge.id), LinExpr::new().term(fv, -1.0).plus(limit), up.rows(delta, &sg, &index.alpha[t]));
                    prog.add_soc(format!("fmin[{},{t}]", edge.id), LinExpr::var(fv).plus(limit), dn.rows(delta, &sg, &index.alpha[t]));
                    fc[e] = Some((up, dn));
                } else {
                    prog.add_le(format!("fmax[{},{t}]", edge.id), LinExpr::var(fv).plus(-limit));
                    prog.add_le(format!("fmin[{},{t}]", edge.id), LinExpr::new().term(fv, -1.0).plus(-limit));
                }
                continue;
            }
            let k = &kappas.unwrap().lines[e].as_ref().ok_or_else(|| {
                Error::IndexMismatch(format!("no linearization for line {}", edge.id))
            })?[t];
            let tv = index.temp[e].as_ref().unwrap();
            let mut rec = LinExpr::var(tv[t]).term(fv, -k.kappa_c).plus(-k.kappa_a);
            if t == 0 {
                rec = rec.plus(-k.kappa_b * initial_temps[e].unwrap());
            } else {
                rec.add_term(tv[t - 1], -k.kappa_b);
            }
            prog.add_eq(format!("temp[{},{t}]", edge.id), rec);
            let t_max = case.line_conditions(e, t)?.unwrap().0.max_temp_c;
            let mut cap = LinExpr::var(tv[t]).plus(-t_max);
            if let Some(rv) = &index.r_th[e] {
                cap.add_term(rv[t], 1.0);
                let cone = thermal_cone(jc, net, e, k)?;
                let mut rhs = LinExpr::var(rv[t]);
                if t > 0 {
                    rhs.add_term(rv[t - 1], -k.kappa_b);
                }
                prog.add_soc(format!("rth[{},{t}]", edge.id), rhs, cone.rows(delta, &sg, &index.alpha[t]));
                tc[e] = Some(cone);
            }
            prog.add_le(format!("tcap[{},{t}]", edge.id), cap);
        }
        flow_cones_t.push(fc);
        thermal_cones_t.push(tc);
    }
    debug_assert_eq!(index.p.iter().map(Vec::len).sum::<usize>(), n_g * horizon);
    Ok(MultiProgram {
        program: prog,
        index,
        mode: cfg.rating_mode,
        epsilon: cfg.epsilon,
        delta,
        sigma_big_omega,
        limits,
        flow_cones: flow_cones_t,
        thermal_cones: thermal_cones_t,
        kappas: kappas.cloned(),
        initial_temps,
        net: net.clone(),
        treatment,
    })
}

/// Tagged multipliers, `[t][g]` or `[t][e]`. Thermal entries are zero on
/// lines without the temperature recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiDuals {
    pub bal: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p_max: Vec<Vec<f64>>,
    pub p_min: Vec<Vec<f64>>,
    /// Entries at `t = 0` are zero (no ramp row).
    pub ramp_up: Vec<Vec<f64>>,
    pub ramp_dn: Vec<Vec<f64>>,
    pub re_up: Vec<Vec<f64>>,
    pub re_dn: Vec<Vec<f64>>,
    pub alpha_nonneg: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub f_max: Vec<Vec<f64>>,
    pub f_min: Vec<Vec<f64>>,
    /// Recursion `t → t+1`.
    pub temp: Vec<Vec<f64>>,
    /// Cap on `T_{t+1}`.
    pub t_cap: Vec<Vec<f64>>,
    /// Thermal reserve cone of step `t → t+1`.
    pub r_th: Vec<Vec<f64>>,
}

fn duals_of(case: &SystemCase, sol: &ConicSolution) -> MultiDuals {
    let h = case.horizon;
    let per_t = |name: &str| -> Vec<f64> { (0..h).map(|t| sol.dual_or_zero(&format!("{name}[{t}]"))).collect() };
    let per_g = |name: &str| -> Vec<Vec<f64>> {
        (0..h)
            .map(|t| case.generators.iter().map(|g| sol.dual_or_zero(&format!("{name}[{},{t}]", g.id))).collect())
            .collect()
    };
    let per_e = |name: &str| -> Vec<Vec<f64>> {
        (0..h)
            .map(|t| case.edges.iter().map(|e| sol.dual_or_zero(&format!("{name}[{},{t}]", e.id))).collect())
            .collect()
    };
    MultiDuals {
        bal: per_t("bal"),
        alpha: per_t("alpha"),
        p_max: per_g("pmax"),
        p_min: per_g("pmin"),
        ramp_up: per_g("ramp_up"),
        ramp_dn: per_g("ramp_dn"),
        re_up: per_g("re_up"),
        re_dn: per_g("re_dn"),
        alpha_nonneg: per_g("lb:alpha"),
        flow: per_e("flow"),
        f_max: per_e("fmax"),
        f_min: per_e("fmin"),
        temp: per_e("temp"),
        t_cap: per_e("tcap"),
        r_th: per_e("rth"),
    }
}

/// Reserve price routes of one generator in one period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiReservePrice {
    /// `λ^re̅ + λ^re̲`.
    pub from_reserve_duals: f64,
    /// `[λ^α + ν − 2c₂Σ_Ωα − Σ λ Q δ] / (Σ_Ω^{1/2}δ)` over thermal and flow
    /// cones, `None` when `Σ_Ω^{1/2}δ` vanishes.
    pub from_alpha_stationarity: Option<f64>,
    /// Participation payment `λ^α − Σ λ Q δ` that supports the dispatch.
    pub tau_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiPrices {
    /// `[t][i]`, from the flow-definition duals.
    pub lmp: Vec<Vec<f64>>,
    /// `[t][i]`, from the thermal-cap and flow-limit duals propagated
    /// backward through the recursion; no flow-definition dual is used.
    pub lmp_temporal: Vec<Vec<f64>>,
    /// `[t][g]`.
    pub lmrp: Vec<Vec<MultiReservePrice>>,
    /// `[t][e][g]`: `Q` of thermal cones.
    pub q_thermal: Vec<Vec<Vec<f64>>>,
    pub degenerate: bool,
    /// Largest difference between `Q` read from cone multipliers and `Q`
    /// evaluated at the primal point, over binding cones.
    pub q_alignment: f64,
}

/// `Q` of every cone of period `t`, per line and generator.
struct PeriodQ {
    flow_upper: Vec<Vec<f64>>,
    flow_lower: Vec<Vec<f64>>,
    thermal: Vec<Vec<f64>>,
    alignment: f64,
}

fn period_q(case: &SystemCase, mp: &MultiProgram, sol: &ConicSolution, d: &MultiDuals, alpha: &[f64], t: usize) -> PeriodQ {
    let n_e = case.edges.len();
    let zero = vec![vec![0.0; alpha.len()]; n_e];
    let mut q = PeriodQ { flow_upper: zero.clone(), flow_lower: zero.clone(), thermal: zero, alignment: 0.0 };
    for (e, edge) in case.edges.iter().enumerate() {
        let sg = mp.net.gen_ptdf(e);
        if let Some((up, dn)) = &mp.flow_cones[t][e] {
            let (qu, gu) = cone_q(up, &sg, alpha, d.f_max[t][e], sol.cone_dual(&format!("fmax[{},{t}]", edge.id)));
            let (ql, gl) = cone_q(dn, &sg, alpha, d.f_min[t][e], sol.cone_dual(&format!("fmin[{},{t}]", edge.id)));
            q.flow_upper[e] = qu;
            q.flow_lower[e] = ql;
            q.alignment = q.alignment.max(gu).max(gl);
        }
        if let Some(c) = &mp.thermal_cones[t][e] {
            let (qt, gt) = cone_q(c, &sg, alpha, d.r_th[t][e], sol.cone_dual(&format!("rth[{},{t}]", edge.id)));
            q.thermal[e] = qt;
            q.alignment = q.alignment.max(gt);
        }
    }
    q
}

/// Sum over cones of `λ·Q_g·δ` for generator `g` in period `t`.
fn delivery_term(mp: &MultiProgram, d: &MultiDuals, q: &PeriodQ, t: usize, g: usize) -> f64 {
    (0..q.thermal.len())
        .map(|e| d.f_max[t][e] * q.flow_upper[e][g] + d.f_min[t][e] * q.flow_lower[e][g] + d.r_th[t][e] * q.thermal[e][g])
        .sum::<f64>()
        * mp.delta
}

/// Energy and reserve prices from the tagged duals.
pub fn prices_multi(case: &SystemCase, mp: &MultiProgram, sol: &ConicSolution, d: &MultiDuals) -> MultiPrices {
    let h = case.horizon;
    let n_e = case.edges.len();
    let n_i = case.nodes.len();
    let net = &mp.net;
    let alpha: Vec<Vec<f64>> = mp.index.alpha.iter().map(|r| r.iter().map(|&j| sol.x[j]).collect()).collect();
    let lmp = (0..h)
        .map(|t| (0..n_i).map(|i| d.bal[t] - (0..n_e).map(|e| net.ptdf.get(e, i) * d.flow[t][e]).sum::<f64>()).collect())
        .collect();

    // Flow multiplier per line and period implied by stationarity in f and T.
    let mut phi = vec![vec![0.0; n_e]; h];
    for e in 0..n_e {
        match mp.kappas.as_ref().and_then(|k| k.lines[e].as_ref()).filter(|_| mp.index.temp[e].is_some()) {
            Some(points) => {
                let mut lambda_t = 0.0;
                for t in (0..h).rev() {
                    lambda_t = if t + 1 < h { points[t + 1].kappa_b * lambda_t - d.t_cap[t][e] } else { -d.t_cap[t][e] };
                    phi[t][e] = -points[t].kappa_c * lambda_t;
                }
            }
            None => {
                for t in 0..h {
                    phi[t][e] = d.f_max[t][e] - d.f_min[t][e];
                }
            }
        }
    }
    let lmp_temporal = (0..h)
        .map(|t| (0..n_i).map(|i| d.bal[t] - (0..n_e).map(|e| net.ptdf.get(e, i) * phi[t][e]).sum::<f64>()).collect())
        .collect();

    let mut q_thermal = Vec::with_capacity(h);
    let mut lmrp = Vec::with_capacity(h);
    let mut q_alignment = 0.0f64;
    for t in 0..h {
        let scale = mp.sigma_big_omega[t].sqrt() * mp.delta;
        let mut row = Vec::with_capacity(alpha[t].len());
        let q = period_q(case, mp, sol, d, &alpha[t], t);
        q_alignment = q_alignment.max(q.alignment);
        for (g, u) in case.generators.iter().enumerate() {
            let delivery = delivery_term(mp, d, &q, t, g);
            let tau_alpha = d.alpha[t] - delivery;
            let local = 2.0 * (u.c2 * mp.sigma_big_omega[t] + TIE_BREAK) * alpha[t][g];
            row.push(MultiReservePrice {
                from_reserve_duals: d.re_up[t][g] + d.re_dn[t][g],
                from_alpha_stationarity: (scale > 1e-9).then(|| (tau_alpha + d.alpha_nonneg[t][g] - local) / scale),
                tau_alpha,
            });
        }
        q_thermal.push(q.thermal);
        lmrp.push(row);
    }
    MultiPrices { lmp, lmp_temporal, lmrp, q_thermal, degenerate: weakly_active(&mp.program, sol), q_alignment }
}

/// The temporally expanded LMP exactly as printed in the source model,
/// `λ^bal_t − ½Σ_e S_{e,i}[κ^b_{t+1}λ^T_{t+1} − λ^T̄_{t+1} + (λ^T_{t−1} + λ^T̄_t)/κ^b_t]`.
/// Reported as a diagnostic only; it does not follow from the stationarity
/// conditions of the program and generally differs from the LMP.
pub fn lmp_printed_temporal(case: &SystemCase, mp: &MultiProgram, d: &MultiDuals) -> Vec<Vec<f64>> {
    let h = case.horizon;
    let n_e = case.edges.len();
    (0..h)
        .map(|t| {
            (0..case.nodes.len())
                .map(|i| {
                    let mut s = 0.0;
                    for e in 0..n_e {
                        let Some(points) = mp.kappas.as_ref().and_then(|k| k.lines[e].as_ref()) else { continue };
                        if mp.index.temp[e].is_none() {
                            continue;
                        }
                        let next = if t + 1 < h { points[t + 1].kappa_b * d.temp[t + 1][e] - d.t_cap[t + 1][e] } else { 0.0 };
                        let prev = if t > 0 { d.temp[t - 1][e] } else { 0.0 };
                        s += mp.net.ptdf.get(e, i) * (next + (prev + d.t_cap[t][e]) / points[t].kappa_b);
                    }
                    d.bal[t] - 0.5 * s
                })
                .collect()
        })
        .collect()
}

/// Scaled residuals of the stationarity conditions for `p`, `α`, `R^up`
/// and `R^dn` in every period, from tagged duals and primal-derived `Q`.
pub fn stationarity_multi(case: &SystemCase, mp: &MultiProgram, sol: &ConicSolution, d: &MultiDuals) -> f64 {
    let h = case.horizon;
    let n_e = case.edges.len();
    let alpha: Vec<Vec<f64>> = mp.index.alpha.iter().map(|r| r.iter().map(|&j| sol.x[j]).collect()).collect();
    let mut worst = 0.0f64;
    let mut check = |terms: &[f64]| {
        let sum: f64 = terms.iter().sum();
        let mag = terms.iter().fold(1.0f64, |m, t| m.max(t.abs()));
        worst = worst.max(sum.abs() / mag);
    };
    let at = |v: &Vec<Vec<f64>>, t: usize, g: usize| if t < h { v[t][g] } else { 0.0 };
    for t in 0..h {
        let scale = mp.sigma_big_omega[t].sqrt() * mp.delta;
        let q = period_q(case, mp, sol, d, &alpha[t], t);
        for (g, u) in case.generators.iter().enumerate() {
            let p = sol.x[mp.index.p[t][g]];
            let c2 = if u.c2 > 0.0 { u.c2 } else { TIE_BREAK };
            let flow: f64 = (0..n_e).map(|e| mp.net.ptdf.get(e, mp.net.gen_node[g]) * d.flow[t][e]).sum();
            check(&[
                u.c1,
                2.0 * c2 * p,
                -d.bal[t],
                d.p_max[t][g],
                -d.p_min[t][g],
                d.ramp_up[t][g],
                -at(&d.ramp_up, t + 1, g),
                -d.ramp_dn[t][g],
                at(&d.ramp_dn, t + 1, g),
                flow,
            ]);
            let delivery = delivery_term(mp, d, &q, t, g);
            check(&[
                2.0 * (u.c2 * mp.sigma_big_omega[t] + TIE_BREAK) * alpha[t][g],
                -d.alpha[t],
                (d.re_up[t][g] + d.re_dn[t][g]) * scale,
                delivery,
                -d.alpha_nonneg[t][g],
            ]);
            check(&[TIE_BREAK, d.p_max[t][g], -d.re_up[t][g], d.ramp_up[t][g], at(&d.ramp_dn, t + 1, g)]);
            check(&[TIE_BREAK, d.p_min[t][g], -d.re_dn[t][g], d.ramp_dn[t][g], at(&d.ramp_up, t + 1, g)]);
        }
    }
    worst
}

/// One successive-linearization iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Largest gap between the program temperatures and the step map
    /// applied to the program flows, °C.
    pub max_delta_t: f64,
}

/// Outcome of a multi-period clearing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiResult {
    pub mode: RatingMode,
    pub epsilon: f64,
    pub delta: f64,
    /// `[t][g]`.
    pub p: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub r_up: Vec<Vec<f64>>,
    pub r_dn: Vec<Vec<f64>>,
    /// `[t][e]`.
    pub flows: Vec<Vec<f64>>,
    /// Per line `T_0..T_T` from the program, for lines under the recursion.
    pub temperatures: Vec<Option<Vec<f64>>>,
    /// Per line `R^th_0..R^th_T`, chance-constrained mode only.
    pub thermal_reserves: Vec<Option<Vec<f64>>>,
    /// Linear limits `[t][e]`; `None` under the recursion.
    pub limits: Vec<Vec<Option<f64>>>,
    pub sigma_big_omega: Vec<f64>,
    pub objective: f64,
    pub cost: f64,
    pub duals: MultiDuals,
    pub prices: MultiPrices,
    pub residuals: Residuals,
    pub stationarity: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

/// Solves and prices an already built program.
pub fn solve_built_multi(case: &SystemCase, mp: &MultiProgram) -> Result<(MultiResult, ConicSolution)> {
    let sol = socp::solve(&mp.program)?;
    let d = duals_of(case, &sol);
    let prices = prices_multi(case, mp, &sol, &d);
    let stationarity = stationarity_multi(case, mp, &sol, &d);
    let x = |v: &Vec<Vec<usize>>| -> Vec<Vec<f64>> { v.iter().map(|r| r.iter().map(|&j| sol.x[j]).collect()).collect() };
    let p = x(&mp.index.p);
    let alpha = x(&mp.index.alpha);
    let temperatures = mp
        .index
        .temp
        .iter()
        .zip(&mp.initial_temps)
        .map(|(v, t0)| v.as_ref().map(|v| std::iter::once(t0.unwrap()).chain(v.iter().map(|&j| sol.x[j])).collect()))
        .collect();
    let thermal_reserves = mp
        .index
        .r_th
        .iter()
        .map(|v| v.as_ref().map(|v| std::iter::once(0.0).chain(v.iter().map(|&j| sol.x[j])).collect()))
        .collect();
    let cost = (0..case.horizon)
        .map(|t| {
            case.generators
                .iter()
                .enumerate()
                .map(|(g, u)| u.c1 * p[t][g] + u.c2 * (p[t][g].powi(2) + mp.sigma_big_omega[t] * alpha[t][g].powi(2)))
                .sum::<f64>()
        })
        .sum();
    let result = MultiResult {
        mode: mp.mode,
        epsilon: mp.epsilon,
        delta: mp.delta,
        r_up: x(&mp.index.r_up),
        r_dn: x(&mp.index.r_dn),
        flows: x(&mp.index.f),
        p,
        alpha,
        temperatures,
        thermal_reserves,
        limits: mp.limits.clone(),
        sigma_big_omega: mp.sigma_big_omega.clone(),
        objective: sol.objective,
        cost,
        duals: d,
        prices,
        residuals: sol.residuals,
        stationarity,
        iterations: vec![],
        converged: true,
    };
    Ok((result, sol))
}

/// Largest gap between the program temperatures and the step map applied to
/// the program flows.
pub fn step_map_gap(case: &SystemCase, r: &MultiResult) -> Result<f64> {
    let sim = simulate_step_map(case, &r.flows)?;
    let mut gap = 0.0f64;
    for (e, temps) in r.temperatures.iter().enumerate() {
        if let (Some(a), Some(b)) = (temps, &sim[e]) {
            for (x, y) in a.iter().zip(b) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    Ok(gap)
}

/// Flows of the reference dispatch: every period cleared with steady-state
/// weather ratings and no temperature dynamics.
pub fn reference_flows(case: &SystemCase, jcs: &[JointCovariance], cfg: &MultiPeriodConfig) -> Result<Vec<Vec<f64>>> {
    let steady = MultiPeriodConfig { rating_mode: RatingMode::Dlr, ..*cfg };
    let loads: Vec<Vec<f64>> = (0..case.horizon).map(|t| case.loads(t)).collect();
    let mp = build_inner(case, &NetworkData::new(case)?, jcs, None, &steady, ThermalTreatment::Steady, &loads)?;
    Ok(solve_built_multi(case, &mp)?.0.flows)
}

/// A converged (or last) iterate together with the program that produced it.
#[derive(Debug, Clone)]
pub struct MultiOutcome {
    pub result: MultiResult,
    pub program: MultiProgram,
    pub solution: ConicSolution,
}

/// Clears the horizon. Static ratings need one solve; the temperature
/// recursion is relinearized at each solution until the program
/// temperatures agree with the step map within the configured tolerance.
pub fn successive_linearization(case: &SystemCase, jcs: &[JointCovariance], cfg: &MultiPeriodConfig) -> Result<MultiOutcome> {
    let net = NetworkData::new(case)?;
    let loads: Vec<Vec<f64>> = (0..case.horizon).map(|t| case.loads(t)).collect();
    if cfg.rating_mode == RatingMode::Slr {
        let mp = build_inner(case, &net, jcs, None, cfg, ThermalTreatment::Static, &loads)?;
        let (mut result, solution) = solve_built_multi(case, &mp)?;
        result.iterations.push(IterationRecord { iteration: 1, objective: result.objective, max_delta_t: 0.0 });
        return Ok(MultiOutcome { result, program: mp, solution });
    }
    let mut flows = reference_flows(case, jcs, cfg)?;
    let mut log = Vec::new();
    let max_iter = cfg.max_iterations.max(1);
    for it in 1..=max_iter {
        let kappas = linearize_evolution(case, jcs, &flows)?;
        let mp = build_inner(case, &net, jcs, Some(&kappas), cfg, ThermalTreatment::Recursion, &loads)?;
        let (mut result, solution) = solve_built_multi(case, &mp)?;
        let gap = step_map_gap(case, &result)?;
        log.push(IterationRecord { iteration: it, objective: result.objective, max_delta_t: gap });
        log::debug!("linearization iteration {it}: objective {:.6}, max ΔT {gap:.4} °C", result.objective);
        let done = gap <= cfg.tolerance_c;
        if done || it == max_iter {
            if !done {
                log::warn!("successive linearization stopped after {it} iterations with max ΔT {gap:.3} °C");
            }
            result.iterations = log;
            result.converged = done;
            return Ok(MultiOutcome { result, program: mp, solution });
        }
        flows = result.flows;
    }
    unreachable!("loop returns on its last iteration")
}

/// Rebuilds the program of `outcome` with one load changed, keeping the
/// linearization fixed, and returns `∂L/∂d_{i,t}` evaluated directly from
/// the constraint functions.
pub fn lagrangian_load_sensitivity(case: &SystemCase, jcs: &[JointCovariance], outcome: &MultiOutcome, node: usize, t: usize) -> Result<f64> {
    let bumped = rebuild_with_load(case, jcs, outcome, node, t, 1.0)?;
    Ok(crate::market_single::constraint_delta(&outcome.program.program, &bumped.program, &outcome.solution.x, &outcome.solution.duals))
}

/// The program of `outcome` with `delta_mw` more load at `(node, t)` and the
/// same linearization.
pub fn rebuild_with_load(case: &SystemCase, jcs: &[JointCovariance], outcome: &MultiOutcome, node: usize, t: usize, delta_mw: f64) -> Result<MultiProgram> {
    let mp = &outcome.program;
    let mut loads: Vec<Vec<f64>> = (0..case.horizon).map(|s| case.loads(s)).collect();
    loads[t][node] += delta_mw;
    let cfg = MultiPeriodConfig::new(mp.epsilon, mp.mode);
    build_inner(case, &mp.net, jcs, mp.kappas.as_ref(), &cfg, mp.treatment, &loads)
}

/// True when every constraint kind matches between two programs.
pub fn same_structure(a: &ConicProgram, b: &ConicProgram) -> bool {
    a.constraints.len() == b.constraints.len()
        && a.constraints.iter().zip(&b.constraints).all(|(x, y)| {
            x.tag == y.tag
                && matches!(
                    (&x.kind, &y.kind),
                    (ConstraintKind::Eq(_), ConstraintKind::Eq(_))
                        | (ConstraintKind::Le(_), ConstraintKind::Le(_))
                        | (ConstraintKind::Soc { .. }, ConstraintKind::Soc { .. })
                )
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermal::{ConductorSpec, WeatherSample};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn coeffs() -> EvolutionCoefficients {
        let w = WeatherSample {
            wind_speed_m_s: 1.0,
            wind_direction_deg: 60.0,
            ambient_temp_c: 30.0,
            solar_radiation_w_m2: 800.0,
            air_density_kg_m3: 1.15,
        };
        thermal::evolution_coefficients(&ConductorSpec::drake(), &w, 300.0).unwrap()
    }

    #[test]
    fn linearization_reproduces_reference_step() {
        let c = coeffs();
        let (ka, kb, kc) = linearize_step(&c, 55.0, 120.0);
        assert_relative_eq!(ka + kb * 55.0 + kc * 120.0, thermal::step_temperature(&c, 55.0, 120.0), max_relative = 1e-14);
        assert!(kb > 0.0 && kb < 1.0);
    }

    #[test]
    fn zero_reference_flow_has_no_flow_sensitivity() {
        let (_, _, kc) = linearize_step(&coeffs(), 40.0, 0.0);
        assert_eq!(kc, 0.0);
    }

    proptest! {
        #[test]
        fn linearization_matches_finite_differences(t in 20.0f64..100.0, f in -200.0f64..200.0) {
            let c = coeffs();
            let (_, kb, kc) = linearize_step(&c, t, f);
            let h = 1e-4 * (1.0 + f.abs());
            let fd_f = (thermal::step_temperature(&c, t, f + h) - thermal::step_temperature(&c, t, f - h)) / (2.0 * h);
            let fd_t = (thermal::step_temperature(&c, t + 1e-3, f) - thermal::step_temperature(&c, t - 1e-3, f)) / 2e-3;
            prop_assert!((fd_f - kc).abs() <= 1e-6 * kc.abs().max(1e-6));
            prop_assert!((fd_t - kb).abs() <= 1e-6 * kb);
        }
    }
}
