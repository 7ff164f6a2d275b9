//! Equilibrium checks, locational marginal emissions and Monte-Carlo
//! validation of the chance constraints.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::grid::{Generator, SystemCase};
use crate::market_multi::{MultiOutcome, MultiResult};
use crate::market_single::{SingleProgram, SingleResult};
use crate::socp::{self, ConicProgram, ConicSolution, ConstraintKind, LinExpr, BINDING_DUAL_TOL};
use crate::thermal;
use crate::uncertainty::{AmbientErrorModel, JointCovariance, VARS_PER_SITE};

/// Samples per parallel work item.
const CHUNK: usize = 1000;
/// Fine step of the nonlinear temperature re-simulation, s.
const FINE_DT_S: f64 = 30.0;

/// Optimal response of one generator to posted prices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestResponse {
    pub profit: f64,
    /// `[t]`.
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub r_up: Vec<f64>,
    pub r_dn: Vec<f64>,
    /// Tags of constraints with a multiplier above the binding threshold.
    pub binding: Vec<String>,
}

/// Profit of a generator under payment `Σ_t π_t p_t + τ_t α_t`.
pub fn profit(gen: &Generator, pi: &[f64], tau: &[f64], sigma_big_omega: &[f64], p: &[f64], alpha: &[f64]) -> f64 {
    (0..p.len())
        .map(|t| {
            pi[t] * p[t] + tau[t] * alpha[t]
                - gen.c1 * p[t]
                - gen.c2 * (p[t] * p[t] + sigma_big_omega[t] * alpha[t] * alpha[t])
        })
        .sum()
}

/// Profit-maximizing schedule of one price-taking generator over `T` periods
/// under energy prices `π_t`, participation payments `τ_t`, reserve
/// coverage `R ≥ Σ_Ω^{1/2}δα` and, for `T > 1`, the ramp constraints of the
/// market. With `T = 1` this is the single-period problem.
pub fn best_response(gen: &Generator, pi: &[f64], tau: &[f64], sigma_big_omega: &[f64], delta: f64) -> Result<BestResponse> {
    let h = pi.len();
    let mut prog = ConicProgram::new();
    let mut v = Vec::with_capacity(h);
    for t in 0..h {
        let p = prog.add_var(format!("p[{t}]"), None, None);
        let a = prog.add_var(format!("alpha[{t}]"), Some(0.0), None);
        let ru = prog.add_var(format!("r_up[{t}]"), None, None);
        let rd = prog.add_var(format!("r_dn[{t}]"), None, None);
        prog.set_cost(p, gen.c1 - pi[t]);
        prog.set_cost(a, -tau[t]);
        prog.add_quadratic(p, gen.c2);
        prog.add_quadratic(a, gen.c2 * sigma_big_omega[t]);
        let scale = sigma_big_omega[t].sqrt() * delta;
        prog.add_le(format!("pmax[{t}]"), LinExpr::var(p).term(ru, 1.0).plus(-gen.p_max));
        prog.add_le(format!("pmin[{t}]"), LinExpr::new().term(p, -1.0).term(rd, 1.0).plus(gen.p_min));
        prog.add_le(format!("re_up[{t}]"), LinExpr::new().term(a, scale).term(ru, -1.0));
        prog.add_le(format!("re_dn[{t}]"), LinExpr::new().term(a, scale).term(rd, -1.0));
        // Reserves carry no value of their own; bounding them keeps the
        // program bounded when prices make capacity free.
        prog.add_le(format!("r_up_cap[{t}]"), LinExpr::var(ru).plus(-(gen.p_max - gen.p_min).max(0.0)));
        prog.add_le(format!("r_dn_cap[{t}]"), LinExpr::var(rd).plus(-(gen.p_max - gen.p_min).max(0.0)));
        if t > 0 {
            let (p0, ru0, rd0): (usize, usize, usize) = v[t - 1];
            prog.add_le(format!("ramp_up[{t}]"), LinExpr::var(p).term(p0, -1.0).term(ru, 1.0).term(rd0, 1.0).plus(-gen.ramp_up));
            prog.add_le(format!("ramp_dn[{t}]"), LinExpr::var(p0).term(p, -1.0).term(rd, 1.0).term(ru0, 1.0).plus(-gen.ramp_dn));
        }
        v.push((p, ru, rd));
    }
    let sol = socp::solve(&prog)?;
    let pick = |k: usize| -> Vec<f64> { (0..h).map(|t| sol.x[4 * t + k]).collect() };
    let (p, alpha) = (pick(0), pick(1));
    let binding = prog
        .constraints
        .iter()
        .zip(&sol.duals)
        .filter(|(_, &d)| d > BINDING_DUAL_TOL)
        .map(|(c, _)| c.tag.clone())
        .collect();
    Ok(BestResponse { profit: profit(gen, pi, tau, sigma_big_omega, &p, &alpha), p, alpha, r_up: pick(2), r_dn: pick(3), binding })
}

/// Equilibrium outcome of one generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorEquilibrium {
    pub generator: String,
    pub dispatched_profit: f64,
    pub best_response_profit: f64,
    /// `(best − dispatched)/max(1, |dispatched|)`.
    pub relative_gap: f64,
    pub binding: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub generators: Vec<GeneratorEquilibrium>,
    /// Largest `|Σp + Σw − Σd|` over periods, MW.
    pub balance_residual: f64,
    /// Largest `|Σα − 1|` over periods.
    pub participation_residual: f64,
    pub max_relative_gap: f64,
}

fn equilibrium(
    case: &SystemCase,
    p: &[Vec<f64>],
    alpha: &[Vec<f64>],
    lmp: &[Vec<f64>],
    tau: &[Vec<f64>],
    sigma_big_omega: &[f64],
    delta: f64,
) -> Result<EquilibriumReport> {
    let h = p.len();
    let nodes = case.generator_nodes();
    let generators = case
        .generators
        .iter()
        .enumerate()
        .map(|(g, gen)| {
            let pi: Vec<f64> = (0..h).map(|t| lmp[t][nodes[g]]).collect();
            let ta: Vec<f64> = (0..h).map(|t| tau[t][g]).collect();
            let pg: Vec<f64> = (0..h).map(|t| p[t][g]).collect();
            let ag: Vec<f64> = (0..h).map(|t| alpha[t][g]).collect();
            let dispatched = profit(gen, &pi, &ta, sigma_big_omega, &pg, &ag);
            let br = best_response(gen, &pi, &ta, sigma_big_omega, delta)?;
            Ok(GeneratorEquilibrium {
                generator: gen.id.clone(),
                dispatched_profit: dispatched,
                best_response_profit: br.profit,
                relative_gap: (br.profit - dispatched) / dispatched.abs().max(1.0),
                binding: br.binding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut balance_residual = 0.0f64;
    let mut participation_residual = 0.0f64;
    for t in 0..h {
        let net: f64 = p[t].iter().sum::<f64>() + case.wind_forecast(t)?.iter().sum::<f64>() - case.loads(t).iter().sum::<f64>();
        balance_residual = balance_residual.max(net.abs());
        participation_residual = participation_residual.max((alpha[t].iter().sum::<f64>() - 1.0).abs());
    }
    let max_relative_gap = generators.iter().map(|g| g.relative_gap).fold(f64::NEG_INFINITY, f64::max);
    Ok(EquilibriumReport { generators, balance_residual, participation_residual, max_relative_gap })
}

/// Best responses at the posted single-period prices: energy at the nodal
/// LMP and participation at `τ_α`.
pub fn equilibrium_single(case: &SystemCase, r: &SingleResult) -> Result<EquilibriumReport> {
    let tau: Vec<f64> = r.prices.lmrp.iter().map(|x| x.tau_alpha).collect();
    equilibrium(case, std::slice::from_ref(&r.p), std::slice::from_ref(&r.alpha), std::slice::from_ref(&r.prices.lmp), &[tau], &[r.sigma_big_omega], r.delta)
}

/// Best responses at the posted multi-period prices, with ramp coupling.
pub fn equilibrium_multi(case: &SystemCase, r: &MultiResult) -> Result<EquilibriumReport> {
    let tau: Vec<Vec<f64>> = r.prices.lmrp.iter().map(|row| row.iter().map(|x| x.tau_alpha).collect()).collect();
    equilibrium(case, &r.p, &r.alpha, &r.prices.lmp, &tau, &r.sigma_big_omega, r.delta)
}

/// First-order response of the primal solution to a change in constraint
/// right-hand sides, holding the active set fixed.
///
/// `b` differs from `a` only in constraint constants. Active constraints are
/// the equalities, inequalities and cones with a multiplier above the binding
/// threshold; cones are linearized at the solution. The equality-constrained
/// quadratic program is solved in the minimum-norm sense, so directions left
/// free by the active set do not move. Returns `None` when the reduced
/// system is inconsistent.
pub fn active_set_sensitivity(a: &ConicProgram, b: &ConicProgram, sol: &ConicSolution) -> Option<DVector<f64>> {
    let n = a.variables.len();
    let x = &sol.x;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let lin = |g: &LinExpr| g.terms.iter().map(|&(j, c)| (j, c)).collect::<Vec<_>>();
    for ((ca, cb), &d) in a.constraints.iter().zip(&b.constraints).zip(&sol.duals) {
        match (&ca.kind, &cb.kind) {
            (ConstraintKind::Eq(ga), ConstraintKind::Eq(gb)) => rows.push((lin(ga), -(gb.eval(x) - ga.eval(x)))),
            (ConstraintKind::Le(ga), ConstraintKind::Le(gb)) if d > BINDING_DUAL_TOL => {
                rows.push((lin(ga), -(gb.eval(x) - ga.eval(x))))
            }
            (ConstraintKind::Soc { t: ta, u: ua }, ConstraintKind::Soc { t: tb, .. }) if d > BINDING_DUAL_TOL => {
                // ‖u‖ − t = 0 linearized: Σ_k (u_k/‖u‖)∇u_k − ∇t.
                let uv: Vec<f64> = ua.iter().map(|r| r.eval(x)).collect();
                let norm = uv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut coef = std::collections::BTreeMap::new();
                for (k, r) in ua.iter().enumerate() {
                    if norm > 1e-12 {
                        for &(j, c) in &r.terms {
                            *coef.entry(j).or_insert(0.0) += uv[k] / norm * c;
                        }
                    }
                }
                for &(j, c) in &ta.terms {
                    *coef.entry(j).or_insert(0.0) -= c;
                }
                rows.push((coef.into_iter().collect(), tb.eval(x) - ta.eval(x)));
            }
            _ => {}
        }
    }
    let m = rows.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    for &(j, c) in &a.quadratic {
        kkt[(j, j)] += 2.0 * c;
    }
    let mut rhs = DVector::zeros(n + m);
    for (r, (terms, v)) in rows.iter().enumerate() {
        for &(j, c) in terms {
            kkt[(n + r, j)] += c;
            kkt[(j, n + r)] += c;
        }
        rhs[n + r] = *v;
    }
    let svd = kkt.clone().svd(true, true);
    let sol_dx = svd.solve(&rhs, 1e-9).ok()?;
    let resid = (&kkt * &sol_dx - &rhs).amax();
    (resid <= 1e-6 * (1.0 + rhs.amax())).then(|| sol_dx.rows(0, n).into_owned())
}

/// Marginal emissions at one node and period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmeEntry {
    pub node: String,
    pub period: usize,
    /// Generators whose output responds to load at this node, with their
    /// response in MW per MW.
    pub marginal: Vec<(String, f64)>,
    /// kg/kWh.
    pub lme: f64,
    /// Set when no generator can respond (all at limits) or the active set
    /// is degenerate; the LME is reported as 0.
    pub no_marginal_unit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmeReport {
    pub entries: Vec<LmeEntry>,
}

/// Generators strictly inside their limits net of reserves, with tolerance
/// `1e-4·p_max`.
pub fn interior_generators(case: &SystemCase, p: &[f64], r_up: &[f64], r_dn: &[f64]) -> Vec<bool> {
    case.generators
        .iter()
        .enumerate()
        .map(|(g, u)| {
            let tol = 1e-4 * u.p_max.abs().max(1.0);
            p[g] - r_dn[g] > u.p_min + tol && p[g] + r_up[g] < u.p_max - tol
        })
        .collect()
}

fn lme_entry(case: &SystemCase, node: usize, t: usize, dp: Option<Vec<f64>>, interior: &[bool]) -> LmeEntry {
    let id = case.nodes[node].id.clone();
    let Some(dp) = dp else {
        return LmeEntry { node: id, period: t, marginal: vec![], lme: 0.0, no_marginal_unit: true };
    };
    let marginal: Vec<(String, f64)> = case
        .generators
        .iter()
        .enumerate()
        .filter(|(g, _)| interior[*g] && dp[*g].abs() > 1e-6)
        .map(|(g, u)| (u.id.clone(), dp[g]))
        .collect();
    let lme = case.generators.iter().zip(&dp).map(|(u, d)| u.emission_rate * d).sum();
    let no_marginal_unit = marginal.is_empty();
    LmeEntry { node: id, period: t, marginal, lme: if no_marginal_unit { 0.0 } else { lme }, no_marginal_unit }
}

/// LMEs of a single-period clearing from the dispatch response to one more
/// MW of load at each node.
pub fn lme_single(case: &SystemCase, sp: &SingleProgram, jc: &JointCovariance, r: &SingleResult) -> Result<LmeReport> {
    let sol = socp::solve(&sp.program)?;
    let interior = interior_generators(case, &r.p, &r.r_up, &r.r_dn);
    let entries = (0..case.nodes.len())
        .map(|i| {
            let mut load = case.loads(sp.config.period);
            load[i] += 1.0;
            let b = crate::market_single::build_single_with(case, &sp.net, jc, &sp.config, &load)?;
            let dp = active_set_sensitivity(&sp.program, &b.program, &sol).map(|dx| sp.index.p.iter().map(|&j| dx[j]).collect());
            Ok(lme_entry(case, i, sp.config.period, dp, &interior))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LmeReport { entries })
}

/// LMEs of a multi-period clearing, per node and period, at the final
/// linearization.
pub fn lme_multi(case: &SystemCase, jcs: &[JointCovariance], outcome: &MultiOutcome) -> Result<LmeReport> {
    let r = &outcome.result;
    let mut entries = Vec::new();
    for t in 0..case.horizon {
        let interior = interior_generators(case, &r.p[t], &r.r_up[t], &r.r_dn[t]);
        for i in 0..case.nodes.len() {
            let b = crate::market_multi::rebuild_with_load(case, jcs, outcome, i, t, 1.0)?;
            let dp = active_set_sensitivity(&outcome.program.program, &b.program, &outcome.solution)
                .map(|dx| outcome.program.index.p[t].iter().map(|&j| dx[j]).collect());
            entries.push(lme_entry(case, i, t, dp, &interior));
        }
    }
    Ok(LmeReport { entries })
}

/// Wilson score interval at 95 %.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let nf = n as f64;
    let ph = k as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (ph + z * z / (2.0 * nf)) / denom;
    let half = z * (ph * (1.0 - ph) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Empirical violation frequency of one chance constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationRow {
    pub constraint: String,
    pub violations: usize,
    pub samples: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<ViolationRow>,
    pub max_rate: f64,
}

impl ValidationReport {
    fn new(epsilon: f64, samples: usize, seed: u64, names: Vec<String>, counts: Vec<usize>) -> Self {
        let rows: Vec<ViolationRow> = names
            .into_iter()
            .zip(counts)
            .map(|(constraint, k)| {
                let (ci_low, ci_high) = wilson_interval(k, samples);
                ViolationRow { constraint, violations: k, samples, rate: k as f64 / samples as f64, ci_low, ci_high }
            })
            .collect();
        let max_rate = rows.iter().map(|r| r.rate).fold(0.0, f64::max);
        ValidationReport { epsilon, samples, seed, rows, max_rate }
    }
}

/// Symmetric square root of a PSD matrix, clipping tiny negative
/// eigenvalues.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 0 {
        return s.clone();
    }
    let eig = SymmetricEigen::new(s.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Runs `n` samples in parallel chunks, each with its own stream of the
/// seeded generator, and sums the per-constraint violation counts.
fn parallel_counts(n: usize, seed: u64, n_rows: usize, f: impl Fn(&mut ChaCha8Rng, &mut [usize]) + Sync) -> Vec<usize> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut counts = vec![0usize; n_rows];
            for _ in 0..CHUNK.min(n - c * CHUNK) {
                f(&mut rng, &mut counts);
            }
            counts
        })
        .reduce(|| vec![0; n_rows], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Monte-Carlo check of a single-period clearing: joint Gaussian wind
/// shortfalls and rating errors, affine recourse `p + αΩ`, and the
/// frequency with which each reserve and (in the chance-constrained mode)
/// each flow limit is exceeded.
pub fn monte_carlo_single(case: &SystemCase, jc: &JointCovariance, r: &SingleResult, n: usize, seed: u64) -> Result<ValidationReport> {
    let cov = jc.sigma_omega_xi();
    let root = psd_sqrt(&cov);
    let m = jc.n_farms();
    let dyn_lines: Vec<usize> = (0..case.edges.len()).filter(|&e| jc.b_omega_e[e].is_some()).collect();
    let s = crate::grid::ptdf(case)?;
    let gen_nodes = case.generator_nodes();
    let wind_nodes = case.wind_nodes();
    let n_e = case.edges.len();
    let a: Vec<Vec<f64>> = (0..n_e)
        .map(|e| {
            let sa: f64 = gen_nodes.iter().zip(&r.alpha).map(|(&i, al)| s.get(e, i) * al).sum();
            wind_nodes.iter().map(|&i| sa - s.get(e, i)).collect()
        })
        .collect();
    let cc_flows = r.mode == crate::market_single::RatingMode::CcDlr;
    let mut names = Vec::new();
    for g in &case.generators {
        names.push(format!("re_up[{}]", g.id));
        names.push(format!("re_dn[{}]", g.id));
    }
    if cc_flows {
        for e in &case.edges {
            names.push(format!("fmax[{}]", e.id));
            names.push(format!("fmin[{}]", e.id));
        }
    }
    let n_g = case.generators.len();
    let counts = parallel_counts(n, seed, names.len(), |rng, counts| {
        let z = &root * standard_normal(rng, cov.nrows());
        let omega_total: f64 = z.rows(0, m).sum();
        for g in 0..n_g {
            let dev = r.alpha[g] * omega_total;
            counts[2 * g] += (dev > r.r_up[g] + 1e-9) as usize;
            counts[2 * g + 1] += (-dev > r.r_dn[g] + 1e-9) as usize;
        }
        if cc_flows {
            for e in 0..n_e {
                let df: f64 = (0..m).map(|k| a[e][k] * z[k]).sum();
                let xi = dyn_lines.iter().position(|&d| d == e).map_or(0.0, |k| z[m + k]);
                let limit = r.ratings[e] + xi;
                counts[2 * n_g + 2 * e] += (r.flows[e] + df > limit + 1e-9) as usize;
                counts[2 * n_g + 2 * e + 1] += (-(r.flows[e] + df) > limit + 1e-9) as usize;
            }
        }
    });
    Ok(ValidationReport::new(r.epsilon, n, seed, names, counts))
}

/// Monte-Carlo check of a multi-period clearing. Per period, joint Gaussian
/// `(ω, ς)` samples drive the recourse, the flows and the weather along each
/// line. Reported per constraint:
///
/// * `re_up/re_dn[g,t]`: reserve shortfall;
/// * `rth[e,t]`: the linear thermal-reserve recursion is exceeded;
/// * `temp[e,t]`: the conductor temperature `T_{t+1}`, re-simulated with the
///   nonlinear heat balance under perturbed weather and flows, exceeds `T^max`;
/// * `fmax/fmin[e,t]`: flow limits of lines outside the recursion (chance-
///   constrained mode).
pub fn monte_carlo_multi(case: &SystemCase, jcs: &[JointCovariance], outcome: &MultiOutcome, n: usize, seed: u64) -> Result<ValidationReport> {
    let r = &outcome.result;
    let mp = &outcome.program;
    let h = case.horizon;
    let n_e = case.edges.len();
    let n_g = case.generators.len();
    let model = AmbientErrorModel::from_case(case)?;
    let dim = model.dim();
    let m = case.wind_farms.len();
    let s = crate::grid::ptdf(case)?;
    let gen_nodes = case.generator_nodes();
    let wind_nodes = case.wind_nodes();
    let cc = r.mode == crate::market_single::RatingMode::CcDlr;

    // Joint (ω, ς) square roots per period.
    let roots: Vec<DMatrix<f64>> = jcs
        .iter()
        .map(|jc| {
            let mut cov = DMatrix::zeros(m + dim, m + dim);
            cov.view_mut((0, 0), (m, m)).copy_from(&jc.sigma_omega);
            cov.view_mut((0, m), (m, dim)).copy_from(&jc.sigma_omega_varsigma);
            cov.view_mut((m, 0), (dim, m)).copy_from(&jc.sigma_omega_varsigma.transpose());
            cov.view_mut((m, m), (dim, dim)).copy_from(&jc.sigma_varsigma);
            psd_sqrt(&cov)
        })
        .collect();
    let a: Vec<Vec<Vec<f64>>> = (0..h)
        .map(|t| {
            (0..n_e)
                .map(|e| {
                    let sa: f64 = gen_nodes.iter().zip(&r.alpha[t]).map(|(&i, al)| s.get(e, i) * al).sum();
                    wind_nodes.iter().map(|&i| sa - s.get(e, i)).collect()
                })
                .collect()
        })
        .collect();
    struct Thermal {
        e: usize,
        spec: thermal::ConductorSpec,
        weather: Vec<thermal::WeatherSample>,
        offset: Option<usize>,
        t0: f64,
    }
    let thermal_lines: Vec<Thermal> = (0..n_e)
        .filter(|&e| r.temperatures[e].is_some())
        .map(|e| {
            let weather = (0..h).map(|t| Ok(case.line_conditions(e, t)?.unwrap().1)).collect::<Result<Vec<_>>>()?;
            let spec = case.line_conditions(e, 0)?.unwrap().0.clone();
            let offset = case.edges[e].site.as_deref().and_then(|st| model.site_offset(st));
            Ok(Thermal { e, spec, weather, offset, t0: r.temperatures[e].as_ref().unwrap()[0] })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut names = Vec::new();
    for t in 0..h {
        for g in &case.generators {
            names.push(format!("re_up[{},{t}]", g.id));
            names.push(format!("re_dn[{},{t}]", g.id));
        }
    }
    let reserve_rows = names.len();
    for th in &thermal_lines {
        for t in 0..h {
            names.push(format!("temp[{},{t}]", case.edges[th.e].id));
        }
    }
    let temp_rows = names.len();
    let rth_lines: Vec<usize> = (0..n_e).filter(|&e| cc && r.thermal_reserves[e].is_some()).collect();
    for &e in &rth_lines {
        for t in 0..h {
            names.push(format!("rth[{},{t}]", case.edges[e].id));
        }
    }
    let rth_rows = names.len();
    let flow_lines: Vec<usize> = (0..n_e).filter(|&e| cc && r.temperatures[e].is_none()).collect();
    for &e in &flow_lines {
        for t in 0..h {
            names.push(format!("fmax[{},{t}]", case.edges[e].id));
            names.push(format!("fmin[{},{t}]", case.edges[e].id));
        }
    }
    let kappas = mp.kappas.as_ref();

    let counts = parallel_counts(n, seed, names.len(), |rng, counts| {
        let samples: Vec<DVector<f64>> = roots.iter().map(|root| root * standard_normal(rng, m + dim)).collect();
        for t in 0..h {
            let z = &samples[t];
            let omega_total: f64 = z.rows(0, m).sum();
            for g in 0..n_g {
                let dev = r.alpha[t][g] * omega_total;
                counts[2 * (t * n_g + g)] += (dev > r.r_up[t][g] + 1e-9) as usize;
                counts[2 * (t * n_g + g) + 1] += (-dev > r.r_dn[t][g] + 1e-9) as usize;
            }
        }
        let df = |t: usize, e: usize| -> f64 { (0..m).map(|k| a[t][e][k] * samples[t][k]).sum() };
        for (l, th) in thermal_lines.iter().enumerate() {
            let weather: Vec<thermal::WeatherSample> = (0..h)
                .map(|t| {
                    let mut w = th.weather[t];
                    if let Some(off) = th.offset {
                        let v = &samples[t];
                        w.wind_speed_m_s = (w.wind_speed_m_s + v[m + off]).max(0.0);
                        w.wind_direction_deg += v[m + off + 1];
                        w.ambient_temp_c += v[m + off + 2];
                    }
                    w
                })
                .collect();
            let flows: Vec<f64> = (0..h).map(|t| r.flows[t][th.e] + df(t, th.e)).collect();
            let t_max = th.spec.max_temp_c;
            match thermal::integrate_transient(&th.spec, &weather, &flows, th.t0, case.period_s, FINE_DT_S) {
                Ok(temps) => {
                    for t in 0..h {
                        counts[reserve_rows + l * h + t] += (temps[t + 1] > t_max + 1e-9) as usize;
                    }
                }
                Err(_) => {
                    for t in 0..h {
                        counts[reserve_rows + l * h + t] += 1;
                    }
                }
            }
        }
        debug_assert_eq!(VARS_PER_SITE, 3);
        for (l, &e) in rth_lines.iter().enumerate() {
            let rth = r.thermal_reserves[e].as_ref().unwrap();
            let points = kappas.and_then(|k| k.lines[e].as_ref()).unwrap();
            for t in 0..h {
                let k = &points[t];
                let dev = k.kappa_c * df(t, e) + k.kappa_dot.dot(&samples[t].rows(m, dim));
                counts[temp_rows + l * h + t] += (k.kappa_b * rth[t] + dev > rth[t + 1] + 1e-9) as usize;
            }
        }
        for (l, &e) in flow_lines.iter().enumerate() {
            for t in 0..h {
                let limit = r.limits[t][e].unwrap();
                let f = r.flows[t][e] + df(t, e);
                counts[rth_rows + 2 * (l * h + t)] += (f > limit + 1e-9) as usize;
                counts[rth_rows + 2 * (l * h + t) + 1] += (-f > limit + 1e-9) as usize;
            }
        }
    });
    Ok(ValidationReport::new(r.epsilon, n, seed, names, counts))
}
