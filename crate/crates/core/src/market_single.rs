//! Single-period chance-constrained DC-OPF and its prices.
//!
//! Generators follow the affine recourse `g = p + αΩ`, where `Ω = Σ_k ω_k` is
//! the total wind shortfall. Reserves cover `αΩ` with probability `1 − ε`,
//! and in the chance-constrained mode every line limit holds with
//! probability `1 − ε` against the joint wind and rating errors.
//!
//! Constraint tags and their multipliers:
//!
//! | tag            | constraint                                   |
//! |----------------|----------------------------------------------|
//! | `bal`          | `Σd − Σw − Σp = 0`                           |
//! | `alpha`        | `1 − Σα = 0`                                 |
//! | `pmax[g]`      | `p + R^up − p^max ≤ 0`                       |
//! | `pmin[g]`      | `p^min − p + R^dn ≤ 0`                       |
//! | `re_up[g]`     | `Σ_Ω^{1/2}δα − R^up ≤ 0`                     |
//! | `re_dn[g]`     | `Σ_Ω^{1/2}δα − R^dn ≤ 0`                     |
//! | `lb:alpha[g]`  | `−α ≤ 0`                                     |
//! | `fmax[e]`      | upper flow limit (linear or cone)            |
//! | `fmin[e]`      | lower flow limit (linear or cone)            |
//!
//! The upper chance constraint reads `aᵀω − ξ ≤ f^max − f` and the lower one
//! `−aᵀω − ξ ≤ f^max + f`, with `a_k = Σ_g S_{e,n(g)}α_g − S_{e,n(k)}`. Their
//! cones therefore use `a − Σ_ω⁻¹b` and `a + Σ_ω⁻¹b` respectively.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{ptdf, PtdfMatrix, SystemCase};
use crate::socp::{self, ConicProgram, ConicSolution, LinExpr, Residuals, BINDING_DUAL_TOL};
use crate::thermal;
use crate::uncertainty::{require_dominance, JointCovariance};

/// Weight of the secondary objective that makes degenerate dispatches
/// unique: `TIE_BREAK·(α² + R^up + R^dn)` for every unit and `TIE_BREAK·p²`
/// for units without quadratic cost.
pub const TIE_BREAK: f64 = 1e-8;

/// Line rating model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatingMode {
    /// Static ratings, no rating uncertainty.
    #[serde(rename = "slr")]
    Slr,
    /// Weather-based ratings at their forecast, no rating uncertainty.
    #[serde(rename = "dlr")]
    Dlr,
    /// Weather-based ratings with correlated wind and rating errors.
    #[serde(rename = "cc-dlr")]
    CcDlr,
}

impl RatingMode {
    pub const ALL: [RatingMode; 3] = [RatingMode::Slr, RatingMode::Dlr, RatingMode::CcDlr];

    pub fn as_str(&self) -> &'static str {
        match self {
            RatingMode::Slr => "slr",
            RatingMode::Dlr => "dlr",
            RatingMode::CcDlr => "cc-dlr",
        }
    }
}

impl std::str::FromStr for RatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slr" => Ok(RatingMode::Slr),
            "dlr" => Ok(RatingMode::Dlr),
            "cc-dlr" | "cc_dlr" | "ccdlr" => Ok(RatingMode::CcDlr),
            other => Err(Error::Validation(format!("unknown rating mode {other:?}"))),
        }
    }
}

/// `Φ⁻¹(1 − ε)`.
pub fn delta_for(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Validation(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinglePeriodConfig {
    pub epsilon: f64,
    pub rating_mode: RatingMode,
    /// Period of the case to clear.
    pub period: usize,
}

impl SinglePeriodConfig {
    pub fn new(epsilon: f64, rating_mode: RatingMode) -> Self {
        SinglePeriodConfig { epsilon, rating_mode, period: 0 }
    }

    pub fn delta(&self) -> Result<f64> {
        delta_for(self.epsilon)
    }
}

/// Network data shared by the market builders.
#[derive(Debug, Clone)]
pub struct NetworkData {
    pub ptdf: PtdfMatrix,
    /// Node index of each generator.
    pub gen_node: Vec<usize>,
    /// Node index of each wind farm.
    pub wind_node: Vec<usize>,
}

impl NetworkData {
    pub fn new(case: &SystemCase) -> Result<Self> {
        Ok(NetworkData { ptdf: ptdf(case)?, gen_node: case.generator_nodes(), wind_node: case.wind_nodes() })
    }

    /// `S_{e,n(g)}` for every generator.
    pub fn gen_ptdf(&self, e: usize) -> Vec<f64> {
        self.gen_node.iter().map(|&i| self.ptdf.get(e, i)).collect()
    }

    /// `S_{e,n(k)}` for every wind farm.
    pub fn wind_ptdf(&self, e: usize) -> Vec<f64> {
        self.wind_node.iter().map(|&i| self.ptdf.get(e, i)).collect()
    }

    /// Nodal injection that does not depend on dispatch: wind minus load.
    pub fn fixed_injection(&self, n_nodes: usize, wind: &[f64], load: &[f64]) -> Vec<f64> {
        let mut inj: Vec<f64> = load.iter().map(|d| -d).collect();
        debug_assert_eq!(inj.len(), n_nodes);
        for (k, &i) in self.wind_node.iter().enumerate() {
            inj[i] += wind[k];
        }
        inj
    }

    /// Flow on line `e` as an affine expression of the dispatch variables.
    pub fn flow_expr(&self, e: usize, p_vars: &[usize], fixed: &[f64]) -> LinExpr {
        let mut f = LinExpr::constant((0..fixed.len()).map(|i| self.ptdf.get(e, i) * fixed[i]).sum());
        for (g, &j) in p_vars.iter().enumerate() {
            f.add_term(j, self.ptdf.get(e, self.gen_node[g]));
        }
        f
    }
}

/// Effective line limits of period `t` under a rating mode, MW.
pub fn line_ratings(case: &SystemCase, mode: RatingMode, t: usize) -> Result<Vec<f64>> {
    (0..case.edges.len())
        .map(|e| match (mode, case.line_conditions(e, t)?) {
            (RatingMode::Slr, _) | (_, None) => Ok(case.edges[e].static_rating_mw),
            (_, Some((spec, w))) => thermal::steady_state_rating(spec, &w, spec.max_temp_c),
        })
        .collect()
}

/// A cone `δ‖[v(α); tail]‖` whose vector part is affine in the participation
/// factors: `v(α) = base + ones·Σ_g s_g α_g` for per-generator weights `s_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCone {
    pub base: DVector<f64>,
    pub ones: DVector<f64>,
    pub tail: f64,
}

impl AlphaCone {
    /// Cone rows scaled by `δ`.
    pub fn rows(&self, delta: f64, weights: &[f64], alpha_vars: &[usize]) -> Vec<LinExpr> {
        let mut rows = Vec::with_capacity(self.base.len() + 1);
        for k in 0..self.base.len() {
            let mut r = LinExpr::constant(delta * self.base[k]);
            for (g, &j) in alpha_vars.iter().enumerate() {
                r.add_term(j, delta * self.ones[k] * weights[g]);
            }
            rows.push(r);
        }
        rows.push(LinExpr::constant(delta * self.tail));
        rows
    }

    /// `‖[v(α); tail]‖`.
    pub fn norm(&self, weights: &[f64], alpha: &[f64]) -> f64 {
        let s: f64 = weights.iter().zip(alpha).map(|(w, a)| w * a).sum();
        ((&self.base + &self.ones * s).norm_squared() + self.tail * self.tail).sqrt()
    }

    /// `Q_g = ∂‖[v(α); tail]‖/∂α_g`, so that the cone contributes `λQ_gδ` to
    /// the stationarity of `α_g`. Zero where the norm vanishes.
    pub fn q_gradient(&self, weights: &[f64], alpha: &[f64]) -> Vec<f64> {
        let s: f64 = weights.iter().zip(alpha).map(|(w, a)| w * a).sum();
        let v = &self.base + &self.ones * s;
        let norm = (v.norm_squared() + self.tail * self.tail).sqrt();
        if norm < 1e-12 {
            return vec![0.0; weights.len()];
        }
        let dir = v.dot(&self.ones) / norm;
        weights.iter().map(|w| w * dir).collect()
    }

    /// `Q_g` read from the conic multiplier `(z₀, z_u)` of the cone instead of
    /// the primal point: `−s_g·(z_u·ones)/z₀`. At an exact optimum of a binding
    /// cone `z_u = −z₀ u/‖u‖` and both forms coincide; at finite solver
    /// accuracy this one keeps the stationarity conditions exact.
    pub fn q_from_dual(&self, weights: &[f64], cone_dual: &[f64]) -> Vec<f64> {
        let z0 = cone_dual[0];
        let dir = -(0..self.ones.len()).map(|k| cone_dual[1 + k] * self.ones[k]).sum::<f64>() / z0;
        weights.iter().map(|w| w * dir).collect()
    }
}

/// `Q` of a cone constraint: from its multiplier when binding, otherwise from
/// the primal point (where it is multiplied by a zero dual anyway). Also
/// returns the largest difference between the two forms.
pub fn cone_q(cone: &AlphaCone, weights: &[f64], alpha: &[f64], dual: f64, cone_dual: Option<&Vec<f64>>) -> (Vec<f64>, f64) {
    let primal = cone.q_gradient(weights, alpha);
    match cone_dual {
        Some(z) if dual > BINDING_DUAL_TOL => {
            let q = cone.q_from_dual(weights, z);
            let gap = q.iter().zip(&primal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            (q, gap)
        }
        _ => (primal, 0.0),
    }
}

/// Upper and lower flow chance-constraint cones of line `e`:
/// `v = Σ_ω^{1/2}a(α) ∓ Σ_ω^{−1/2}b_ωe` with `a_k = Σ_g S_{e,n(g)}α_g − S_{e,n(k)}`
/// and tail `√(σ² − bᵀΣ_ω⁻¹b)`.
pub fn flow_cones(jc: &JointCovariance, net: &NetworkData, e: usize) -> Result<(AlphaCone, AlphaCone)> {
    let m = jc.n_farms();
    let sw = DVector::from_vec(net.wind_ptdf(e));
    let base = -(&jc.sigma_omega_sqrt * sw);
    let ones = &jc.sigma_omega_sqrt * DVector::from_element(m, 1.0);
    let (corr, tail) = match &jc.b_omega_e[e] {
        Some(b) => (&jc.sigma_omega_inv_sqrt * b, jc.rating_tail(e)?),
        None => (DVector::zeros(m), 0.0),
    };
    Ok((
        AlphaCone { base: &base - &corr, ones: ones.clone(), tail },
        AlphaCone { base: &base + &corr, ones, tail },
    ))
}

/// Variable indices of a single-period program.
#[derive(Debug, Clone, Serialize)]
pub struct SingleIndex {
    pub p: Vec<usize>,
    pub alpha: Vec<usize>,
    pub r_up: Vec<usize>,
    pub r_dn: Vec<usize>,
}

/// A built single-period program with everything needed to price it.
#[derive(Debug, Clone)]
pub struct SingleProgram {
    pub program: ConicProgram,
    pub index: SingleIndex,
    pub config: SinglePeriodConfig,
    pub delta: f64,
    pub sigma_big_omega: f64,
    pub ratings: Vec<f64>,
    pub fixed_injection: Vec<f64>,
    /// Upper and lower cones per line in the chance-constrained mode.
    pub cones: Vec<Option<(AlphaCone, AlphaCone)>>,
    pub net: NetworkData,
}

/// Builds the single-period program. The caller supplies the covariance of
/// the period being cleared.
pub fn build_single(case: &SystemCase, jc: &JointCovariance, cfg: &SinglePeriodConfig) -> Result<SingleProgram> {
    let net = NetworkData::new(case)?;
    build_single_with(case, &net, jc, cfg, &case.loads(cfg.period))
}

/// Builds with an explicit nodal load vector (used by perturbation tests).
pub fn build_single_with(
    case: &SystemCase,
    net: &NetworkData,
    jc: &JointCovariance,
    cfg: &SinglePeriodConfig,
    load: &[f64],
) -> Result<SingleProgram> {
    let t = cfg.period;
    if t >= case.horizon {
        return Err(Error::Validation(format!("period {t} outside horizon {}", case.horizon)));
    }
    let delta = cfg.delta()?;
    if jc.n_farms() != case.wind_farms.len() || jc.b_omega_e.len() != case.edges.len() {
        return Err(Error::IndexMismatch("covariance does not match the case".into()));
    }
    let cc = cfg.rating_mode == RatingMode::CcDlr;
    if cc {
        let ids: Vec<String> = case.edges.iter().map(|e| e.id.clone()).collect();
        require_dominance(jc, &ids)?;
    }
    let ratings = line_ratings(case, cfg.rating_mode, t)?;
    let wind = case.wind_forecast(t)?;
    let fixed = net.fixed_injection(case.nodes.len(), &wind, load);
    let sigma_big_omega = jc.sigma_big_omega;
    let reserve_coeff = sigma_big_omega.sqrt() * delta;

    let mut prog = ConicProgram::new();
    let mut index = SingleIndex { p: vec![], alpha: vec![], r_up: vec![], r_dn: vec![] };
    for g in &case.generators {
        index.p.push(prog.add_var(format!("p[{}]", g.id), None, None));
        index.alpha.push(prog.add_var(format!("alpha[{}]", g.id), Some(0.0), None));
        index.r_up.push(prog.add_var(format!("r_up[{}]", g.id), None, None));
        index.r_dn.push(prog.add_var(format!("r_dn[{}]", g.id), None, None));
    }
    for (k, g) in case.generators.iter().enumerate() {
        let (p, a, ru, rd) = (index.p[k], index.alpha[k], index.r_up[k], index.r_dn[k]);
        prog.set_cost(p, g.c1);
        prog.add_quadratic(p, if g.c2 > 0.0 { g.c2 } else { TIE_BREAK });
        prog.add_quadratic(a, g.c2 * sigma_big_omega + TIE_BREAK);
        prog.set_cost(ru, TIE_BREAK);
        prog.set_cost(rd, TIE_BREAK);
        prog.add_le(format!("pmax[{}]", g.id), LinExpr::var(p).term(ru, 1.0).plus(-g.p_max));
        prog.add_le(format!("pmin[{}]", g.id), LinExpr::new().term(p, -1.0).term(rd, 1.0).plus(g.p_min));
        prog.add_le(format!("re_up[{}]", g.id), LinExpr::new().term(a, reserve_coeff).term(ru, -1.0));
        prog.add_le(format!("re_dn[{}]", g.id), LinExpr::new().term(a, reserve_coeff).term(rd, -1.0));
    }
    let net_fixed: f64 = fixed.iter().sum();
    let mut bal = LinExpr::constant(-net_fixed);
    for &p in &index.p {
        bal.add_term(p, -1.0);
    }
    prog.add_eq("bal", bal);
    let mut sum_alpha = LinExpr::constant(1.0);
    for &a in &index.alpha {
        sum_alpha.add_term(a, -1.0);
    }
    prog.add_eq("alpha", sum_alpha);

    let mut cones = Vec::with_capacity(case.edges.len());
    for (e, edge) in case.edges.iter().enumerate() {
        let f = net.flow_expr(e, &index.p, &fixed);
        if cc {
            let (up, dn) = flow_cones(jc, net, e)?;
            let sg = net.gen_ptdf(e);
            let upper_t = f.scaled(-1.0).plus(ratings[e]);
            let lower_t = f.clone().plus(ratings[e]);
            prog.add_soc(format!("fmax[{}]", edge.id), upper_t, up.rows(delta, &sg, &index.alpha));
            prog.add_soc(format!("fmin[{}]", edge.id), lower_t, dn.rows(delta, &sg, &index.alpha));
            cones.push(Some((up, dn)));
        } else {
            prog.add_le(format!("fmax[{}]", edge.id), f.clone().plus(-ratings[e]));
            prog.add_le(format!("fmin[{}]", edge.id), f.scaled(-1.0).plus(-ratings[e]));
            cones.push(None);
        }
    }
    Ok(SingleProgram {
        program: prog,
        index,
        config: *cfg,
        delta,
        sigma_big_omega,
        ratings,
        fixed_injection: fixed,
        cones,
        net: net.clone(),
    })
}

/// Tagged multipliers of a single-period solve, per generator or per line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleDuals {
    pub bal: f64,
    pub alpha: f64,
    pub p_max: Vec<f64>,
    pub p_min: Vec<f64>,
    pub re_up: Vec<f64>,
    pub re_dn: Vec<f64>,
    pub alpha_nonneg: Vec<f64>,
    pub f_max: Vec<f64>,
    pub f_min: Vec<f64>,
}

/// Reserve price routes of one generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReservePrice {
    /// `λ^re̅ + λ^re̲`.
    pub from_reserve_duals: f64,
    /// `[λ^α + ν − 2c₂Σ_Ωα − Σ(λ̄Q̄ + λ̲Q̲)δ − 2·TIE_BREAK·α] / (Σ_Ω^{1/2}δ)`, `None`
    /// when `Σ_Ω^{1/2}δ` vanishes.
    pub from_alpha_stationarity: Option<f64>,
    /// Payment per unit of participation factor that supports the dispatch as
    /// a competitive equilibrium: `λ^α − Σ(λ̄Q̄ + λ̲Q̲)δ`.
    pub tau_alpha: f64,
}

/// Prices of a single-period solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinglePrices {
    /// Per node.
    pub lmp: Vec<f64>,
    /// Per generator.
    pub lmrp: Vec<ReservePrice>,
    /// Per line and generator: `Q̄` and `Q̲`.
    pub q_upper: Vec<Vec<f64>>,
    pub q_lower: Vec<Vec<f64>>,
    /// Set when a constraint is active with a multiplier below the binding
    /// threshold, so the duals may not be unique.
    pub degenerate: bool,
    /// Largest difference between `Q` read from cone multipliers and `Q`
    /// evaluated at the primal point, over binding cones.
    pub q_alignment: f64,
}

/// Outcome of a single-period clearing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleResult {
    pub mode: RatingMode,
    pub epsilon: f64,
    pub delta: f64,
    pub period: usize,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub r_up: Vec<f64>,
    pub r_dn: Vec<f64>,
    /// Forecast flows per line.
    pub flows: Vec<f64>,
    /// Effective limits per line.
    pub ratings: Vec<f64>,
    /// Program objective including the tie-break terms.
    pub objective: f64,
    /// Expected generation cost `Σ c₁p + c₂(p² + Σ_Ωα²)`.
    pub cost: f64,
    pub sigma_big_omega: f64,
    pub duals: SingleDuals,
    pub prices: SinglePrices,
    pub residuals: Residuals,
    /// Largest scaled residual of the price-forming stationarity conditions.
    pub stationarity: f64,
}

fn duals_of(case: &SystemCase, sol: &ConicSolution) -> SingleDuals {
    let g = |prefix: &str| -> Vec<f64> {
        case.generators.iter().map(|u| sol.dual_or_zero(&format!("{prefix}[{}]", u.id))).collect()
    };
    let l = |prefix: &str| -> Vec<f64> {
        case.edges.iter().map(|e| sol.dual_or_zero(&format!("{prefix}[{}]", e.id))).collect()
    };
    SingleDuals {
        bal: sol.dual_or_zero("bal"),
        alpha: sol.dual_or_zero("alpha"),
        p_max: g("pmax"),
        p_min: g("pmin"),
        re_up: g("re_up"),
        re_dn: g("re_dn"),
        alpha_nonneg: case.generators.iter().map(|u| sol.dual_or_zero(&format!("lb:alpha[{}]", u.id))).collect(),
        f_max: l("fmax"),
        f_min: l("fmin"),
    }
}

/// Energy and reserve prices from the tagged duals.
pub fn prices_single(case: &SystemCase, sp: &SingleProgram, sol: &ConicSolution, duals: &SingleDuals) -> SinglePrices {
    let net = &sp.net;
    let n_gen = case.generators.len();
    let alpha: Vec<f64> = sp.index.alpha.iter().map(|&j| sol.x[j]).collect();
    let lmp = (0..case.nodes.len())
        .map(|i| {
            duals.bal
                - (0..case.edges.len()).map(|e| (duals.f_max[e] - duals.f_min[e]) * net.ptdf.get(e, i)).sum::<f64>()
        })
        .collect();
    let mut q_upper = vec![vec![0.0; n_gen]; case.edges.len()];
    let mut q_lower = vec![vec![0.0; n_gen]; case.edges.len()];
    let mut q_alignment = 0.0f64;
    for (e, edge) in case.edges.iter().enumerate() {
        if let Some((up, dn)) = &sp.cones[e] {
            let sg = net.gen_ptdf(e);
            let (qu, gu) = cone_q(up, &sg, &alpha, duals.f_max[e], sol.cone_dual(&format!("fmax[{}]", edge.id)));
            let (ql, gl) = cone_q(dn, &sg, &alpha, duals.f_min[e], sol.cone_dual(&format!("fmin[{}]", edge.id)));
            q_upper[e] = qu;
            q_lower[e] = ql;
            q_alignment = q_alignment.max(gu).max(gl);
        }
    }
    let scale = sp.sigma_big_omega.sqrt() * sp.delta;
    let lmrp = (0..n_gen)
        .map(|g| {
            let delivery: f64 = (0..case.edges.len())
                .map(|e| duals.f_max[e] * q_upper[e][g] + duals.f_min[e] * q_lower[e][g])
                .sum::<f64>()
                * sp.delta;
            let tau_alpha = duals.alpha - delivery;
            let local = 2.0 * (case.generators[g].c2 * sp.sigma_big_omega + TIE_BREAK) * alpha[g];
            let from_alpha = (scale > 1e-9).then(|| (tau_alpha + duals.alpha_nonneg[g] - local) / scale);
            ReservePrice {
                from_reserve_duals: duals.re_up[g] + duals.re_dn[g],
                from_alpha_stationarity: from_alpha,
                tau_alpha,
            }
        })
        .collect();
    SinglePrices { lmp, lmrp, q_upper, q_lower, degenerate: weakly_active(&sp.program, sol), q_alignment }
}

/// True when some linear inequality is active (slack below 1e-7 relative)
/// while its multiplier is below the binding threshold.
pub(crate) fn weakly_active(prog: &ConicProgram, sol: &ConicSolution) -> bool {
    prog.constraints.iter().enumerate().any(|(k, c)| match &c.kind {
        socp::ConstraintKind::Le(g) => {
            let v = g.eval(&sol.x);
            v.abs() <= 1e-7 * (1.0 + g.constant.abs()) && sol.duals[k] < BINDING_DUAL_TOL && !c.tag.starts_with("lb:")
        }
        _ => false,
    })
}

/// Scaled residuals of the stationarity conditions for `p`, `α`, `R^up` and
/// `R^dn`, evaluated from the tagged duals and the primal-derived `Q`.
pub fn stationarity_single(case: &SystemCase, sp: &SingleProgram, sol: &ConicSolution, d: &SingleDuals, pr: &SinglePrices) -> f64 {
    let net = &sp.net;
    let scale = sp.sigma_big_omega.sqrt() * sp.delta;
    let mut worst = 0.0f64;
    let mut check = |terms: &[f64]| {
        let sum: f64 = terms.iter().sum();
        let mag = terms.iter().fold(1.0f64, |m, t| m.max(t.abs()));
        worst = worst.max(sum.abs() / mag);
    };
    for (g, u) in case.generators.iter().enumerate() {
        let p = sol.x[sp.index.p[g]];
        let a = sol.x[sp.index.alpha[g]];
        let c2 = if u.c2 > 0.0 { u.c2 } else { TIE_BREAK };
        let congestion: f64 = (0..case.edges.len())
            .map(|e| (d.f_max[e] - d.f_min[e]) * net.ptdf.get(e, net.gen_node[g]))
            .sum();
        check(&[u.c1, 2.0 * c2 * p, d.p_max[g], -d.p_min[g], -d.bal, congestion]);
        let delivery: f64 = (0..case.edges.len())
            .map(|e| d.f_max[e] * pr.q_upper[e][g] + d.f_min[e] * pr.q_lower[e][g])
            .sum::<f64>()
            * sp.delta;
        check(&[
            delivery,
            2.0 * (u.c2 * sp.sigma_big_omega + TIE_BREAK) * a,
            (d.re_up[g] + d.re_dn[g]) * scale,
            -d.alpha,
            -d.alpha_nonneg[g],
        ]);
        check(&[TIE_BREAK, d.p_max[g], -d.re_up[g]]);
        check(&[TIE_BREAK, d.p_min[g], -d.re_dn[g]]);
    }
    worst
}

/// Builds, solves and prices one period.
pub fn solve_single(case: &SystemCase, jc: &JointCovariance, cfg: &SinglePeriodConfig) -> Result<SingleResult> {
    let sp = build_single(case, jc, cfg)?;
    solve_built_single(case, &sp)
}

/// Solves and prices an already built program.
pub fn solve_built_single(case: &SystemCase, sp: &SingleProgram) -> Result<SingleResult> {
    let sol = socp::solve(&sp.program)?;
    let duals = duals_of(case, &sol);
    let prices = prices_single(case, sp, &sol, &duals);
    let stationarity = stationarity_single(case, sp, &sol, &duals, &prices);
    let x = |v: &[usize]| -> Vec<f64> { v.iter().map(|&j| sol.x[j]).collect() };
    let p = x(&sp.index.p);
    let alpha = x(&sp.index.alpha);
    let flows = (0..case.edges.len())
        .map(|e| sp.net.flow_expr(e, &sp.index.p, &sp.fixed_injection).eval(&sol.x))
        .collect();
    let cost = case
        .generators
        .iter()
        .enumerate()
        .map(|(g, u)| u.c1 * p[g] + u.c2 * (p[g] * p[g] + sp.sigma_big_omega * alpha[g] * alpha[g]))
        .sum();
    Ok(SingleResult {
        mode: sp.config.rating_mode,
        epsilon: sp.config.epsilon,
        delta: sp.delta,
        period: sp.config.period,
        r_up: x(&sp.index.r_up),
        r_dn: x(&sp.index.r_dn),
        p,
        alpha,
        flows,
        ratings: sp.ratings.clone(),
        objective: sol.objective,
        cost,
        sigma_big_omega: sp.sigma_big_omega,
        duals,
        prices,
        residuals: sol.residuals,
        stationarity,
    })
}

/// `∂L/∂d_i` evaluated directly from the program: rebuilds the constraints
/// with one extra MW of load at node `i` and sums multiplier-weighted
/// changes of every constraint function at the optimal point. This path
/// shares no code with the price formula.
pub fn lagrangian_load_sensitivity(
    case: &SystemCase,
    sp: &SingleProgram,
    jc: &JointCovariance,
    sol_x: &[f64],
    duals: &[f64],
    node: usize,
) -> Result<f64> {
    let mut load = case.loads(sp.config.period);
    load[node] += 1.0;
    let bumped = build_single_with(case, &sp.net, jc, &sp.config, &load)?;
    Ok(constraint_delta(&sp.program, &bumped.program, sol_x, duals))
}

/// `Σ_k λ_k (g'_k(x) − g_k(x))` over two programs with identical structure.
pub fn constraint_delta(a: &ConicProgram, b: &ConicProgram, x: &[f64], duals: &[f64]) -> f64 {
    a.constraints
        .iter()
        .zip(&b.constraints)
        .zip(duals)
        .map(|((ca, cb), &l)| match (&ca.kind, &cb.kind) {
            (socp::ConstraintKind::Eq(ga), socp::ConstraintKind::Eq(gb))
            | (socp::ConstraintKind::Le(ga), socp::ConstraintKind::Le(gb)) => l * (gb.eval(x) - ga.eval(x)),
            (socp::ConstraintKind::Soc { t: ta, .. }, socp::ConstraintKind::Soc { t: tb, .. }) => {
                -l * (tb.eval(x) - ta.eval(x))
            }
            _ => unreachable!("programs differ in structure"),
        })
        .sum()
}
