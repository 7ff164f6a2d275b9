//! Correlated wind and rating uncertainty.
//!
//! Ambient forecast errors `ς ~ N(0, Σ_ς)` are ordered site-major with three
//! variables per site: wind speed, wind direction and ambient temperature.
//! Wind-farm errors and rating errors are linear in `ς` through finite
//! difference gradients of the wind power curve, the steady rating and the
//! one-step temperature coefficients.
//!
//! Sign convention: `ω_k` is the wind *shortfall* of farm `k` (forecast minus
//! realization), so `ω = −Γ_wᵀς` and generators cover `Ω = Σ_k ω_k` through
//! their participation factors. Rating errors are `ξ_e = γ_fᵀς` (realized
//! rating minus forecast rating).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{AmbientErrors, SystemCase};
use crate::thermal::{self, WeatherSample};

/// Ambient variables per site.
pub const VARS_PER_SITE: usize = 3;

/// Ridge added to near-singular wind covariances before inversion.
pub const RIDGE: f64 = 1e-10;

/// Aerodynamic wind power `½ρAv³` in MW.
pub fn wind_power(rho: f64, area_m2: f64, v: f64) -> f64 {
    0.5 * rho * area_m2 * v.max(0.0).powi(3) / 1e6
}

/// Wind power clipped at the turbine capacity.
pub fn wind_power_clipped(rho: f64, area_m2: f64, v: f64, capacity_mw: Option<f64>) -> f64 {
    let p = wind_power(rho, area_m2, v);
    capacity_mw.map_or(p, |c| p.min(c))
}

/// Covariance of the ambient forecast errors.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientErrorModel {
    pub sigma_varsigma: DMatrix<f64>,
    pub sites: Vec<String>,
}

impl AmbientErrorModel {
    /// Model without uncertainty.
    pub fn zero(sites: Vec<String>) -> Self {
        let n = VARS_PER_SITE * sites.len();
        AmbientErrorModel { sigma_varsigma: DMatrix::zeros(n, n), sites }
    }

    /// Builds `Σ_ς` from the case description: either the dense matrix or
    /// `(C_cross ⊗ C_within) ∘ ssᵀ`.
    pub fn from_spec(spec: &AmbientErrors) -> Result<Self> {
        let n_sites = spec.sites.len();
        let n = VARS_PER_SITE * n_sites;
        let sigma = if let Some(d) = &spec.dense_covariance {
            DMatrix::from_fn(n, n, |i, j| d[i][j])
        } else {
            let within = spec.within_site_correlation.unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            let cross = |a: usize, b: usize| match &spec.cross_site_correlation {
                Some(c) => c[a][b],
                None => f64::from(u8::from(a == b)),
            };
            DMatrix::from_fn(n, n, |i, j| {
                let (si, vi) = (i / VARS_PER_SITE, i % VARS_PER_SITE);
                let (sj, vj) = (j / VARS_PER_SITE, j % VARS_PER_SITE);
                cross(si, sj) * within[vi][vj] * spec.std[vi] * spec.std[vj]
            })
        };
        let model = AmbientErrorModel { sigma_varsigma: sigma, sites: spec.sites.clone() };
        model.check_psd()?;
        Ok(model)
    }

    /// Model of a case, or a zero model over the case sites when the case has
    /// no error statistics.
    pub fn from_case(case: &SystemCase) -> Result<Self> {
        match &case.ambient_errors {
            Some(spec) => Self::from_spec(spec),
            None => Ok(Self::zero(case.referenced_sites().into_iter().collect())),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma_varsigma.nrows()
    }

    /// Offset of a site's block in `ς`.
    pub fn site_offset(&self, site: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == site).map(|k| VARS_PER_SITE * k)
    }

    fn check_psd(&self) -> Result<()> {
        let s = &self.sigma_varsigma;
        let scale = s.amax().max(1.0);
        if (s - s.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Validation("ambient error covariance is not symmetric".into()));
        }
        let min = SymmetricEigen::new(s.clone()).eigenvalues.min();
        if min < -1e-9 * scale {
            return Err(Error::Validation(format!(
                "ambient error covariance is not positive semidefinite (eigenvalue {min:.3e})"
            )));
        }
        Ok(())
    }
}

/// Gradients of the uncertain quantities of one period with respect to `ς`.
/// All vectors have the full length of `ς`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySet {
    /// Per wind farm: gradient of the (unclipped) wind power, MW per unit.
    pub gamma_w: Vec<DVector<f64>>,
    /// Per line: gradient of the steady rating in MW, `None` for static lines.
    pub gamma_f: Vec<Option<DVector<f64>>>,
    /// Per line: gradients of `μ^a..μ^d`.
    pub gamma_mu: Vec<Option<[DVector<f64>; 4]>>,
}

const VAR_NAMES: [&str; VARS_PER_SITE] = ["wind speed", "wind direction", "ambient temperature"];

fn get_var(w: &WeatherSample, k: usize) -> f64 {
    match k {
        0 => w.wind_speed_m_s,
        1 => w.wind_direction_deg,
        _ => w.ambient_temp_c,
    }
}

fn with_var(w: &WeatherSample, k: usize, x: f64) -> WeatherSample {
    let mut out = *w;
    match k {
        0 => out.wind_speed_m_s = x,
        1 => out.wind_direction_deg = x,
        _ => out.ambient_temp_c = x,
    }
    out
}

/// Central finite-difference gradient of `f` with respect to the three
/// ambient variables, step `max(1e-4, 1e-4·|x|)`. Wind speed falls back to a
/// forward difference when the backward point would be negative.
pub fn ambient_gradient<const N: usize>(
    w: &WeatherSample,
    f: impl Fn(&WeatherSample) -> Result<[f64; N]>,
) -> Result<[[f64; VARS_PER_SITE]; N]> {
    let mut out = [[0.0; VARS_PER_SITE]; N];
    for k in 0..VARS_PER_SITE {
        let x = get_var(w, k);
        let h = (1e-4 * x.abs()).max(1e-4);
        let (lo, hi) = if k == 0 && x - h < 0.0 { (x, x + h) } else { (x - h, x + h) };
        let fp = f(&with_var(w, k, hi))?;
        let fm = f(&with_var(w, k, lo))?;
        for n in 0..N {
            out[n][k] = (fp[n] - fm[n]) / (hi - lo);
        }
    }
    Ok(out)
}

/// Sensitivities of period `t`. Quantities tied to sites absent from the
/// error model have zero gradients.
pub fn sensitivities(case: &SystemCase, model: &AmbientErrorModel, t: usize) -> Result<SensitivitySet> {
    let dim = model.dim();
    let place = |site: &str, g: [f64; VARS_PER_SITE]| -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        if let Some(off) = model.site_offset(site) {
            for k in 0..VARS_PER_SITE {
                v[off + k] = g[k];
            }
        }
        v
    };
    let mut gamma_w = Vec::with_capacity(case.wind_farms.len());
    for farm in &case.wind_farms {
        let w = case.site_weather(&farm.site, t)?;
        let [g] = ambient_gradient(&w, |s| Ok([wind_power(s.air_density_kg_m3, farm.swept_area_m2, s.wind_speed_m_s)]))?;
        gamma_w.push(place(&farm.site, g));
    }
    let mut gamma_f = Vec::with_capacity(case.edges.len());
    let mut gamma_mu = Vec::with_capacity(case.edges.len());
    for (e, edge) in case.edges.iter().enumerate() {
        match case.line_conditions(e, t)? {
            Some((spec, w)) => {
                let site = edge.site.as_deref().unwrap_or_default();
                let [gf] = ambient_gradient(&w, |s| Ok([thermal::steady_state_rating(spec, s, spec.max_temp_c)?]))?;
                let gm = ambient_gradient(&w, |s| Ok(thermal::evolution_coefficients(spec, s, case.period_s)?.as_array()))?;
                gamma_f.push(Some(place(site, gf)));
                gamma_mu.push(Some(gm.map(|g| place(site, g))));
            }
            None => {
                gamma_f.push(None);
                gamma_mu.push(None);
            }
        }
    }
    Ok(SensitivitySet { gamma_w, gamma_f, gamma_mu })
}

/// Names of the `ς` entries, for reports.
pub fn variable_names(model: &AmbientErrorModel) -> Vec<String> {
    model
        .sites
        .iter()
        .flat_map(|s| VAR_NAMES.iter().map(move |v| format!("{s}/{v}")))
        .collect()
}

/// Covariances consumed by the chance constraints of one period.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    /// Wind shortfall covariance `Σ_ω`, farms × farms.
    pub sigma_omega: DMatrix<f64>,
    /// Variance of the total shortfall `Σ_Ω = 1ᵀΣ_ω1`.
    pub sigma_big_omega: f64,
    /// Per line: `Cov(ω, ξ_e)`.
    pub b_omega_e: Vec<Option<DVector<f64>>>,
    /// Per line: rating error standard deviation, MW.
    pub sigma_le: Vec<Option<f64>>,
    /// Rating error covariance over all lines; zero rows for static lines.
    /// The diagonal equals `σ_le²`, including overrides.
    pub sigma_xi: DMatrix<f64>,
    /// `Cov(ω, ς)`, farms × ambient variables.
    pub sigma_omega_varsigma: DMatrix<f64>,
    pub sigma_varsigma: DMatrix<f64>,
    /// Per line: gradients of `μ^a..μ^d` (copied from the sensitivities).
    pub gamma_mu: Vec<Option<[DVector<f64>; 4]>>,
    /// Symmetric square root of `Σ_ω`.
    pub sigma_omega_sqrt: DMatrix<f64>,
    /// Symmetric inverse square root of `Σ_ω` (ridged when near-singular).
    pub sigma_omega_inv_sqrt: DMatrix<f64>,
    /// Whether the ridge was needed.
    pub ridged: bool,
}

impl JointCovariance {
    pub fn n_farms(&self) -> usize {
        self.sigma_omega.nrows()
    }

    /// `Σ_ω⁻¹` consistent with the stored inverse square root.
    pub fn sigma_omega_inv(&self) -> DMatrix<f64> {
        &self.sigma_omega_inv_sqrt * &self.sigma_omega_inv_sqrt
    }

    /// Joint covariance of `(ω, ξ)` over all farms and the dynamic lines,
    /// in line order.
    pub fn sigma_omega_xi(&self) -> DMatrix<f64> {
        let m = self.n_farms();
        let lines: Vec<usize> = (0..self.b_omega_e.len()).filter(|&e| self.b_omega_e[e].is_some()).collect();
        let n = m + lines.len();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((0, 0), (m, m)).copy_from(&self.sigma_omega);
        for (k, &e) in lines.iter().enumerate() {
            let b = self.b_omega_e[e].as_ref().expect("dynamic line");
            for i in 0..m {
                out[(i, m + k)] = b[i];
                out[(m + k, i)] = b[i];
            }
            for (k2, &e2) in lines.iter().enumerate() {
                out[(m + k, m + k2)] = self.sigma_xi[(e, e2)];
            }
        }
        out
    }

    /// `bᵀΣ_ω⁻¹b` for line `e`.
    pub fn explained_rating_variance(&self, e: usize) -> f64 {
        match &self.b_omega_e[e] {
            Some(b) => (&self.sigma_omega_inv_sqrt * b).norm_squared(),
            None => 0.0,
        }
    }

    /// Tail entry `√(σ² − bᵀΣ⁻¹b)` of the single-period flow cone.
    pub fn rating_tail(&self, e: usize) -> Result<f64> {
        let s2 = self.sigma_le[e].unwrap_or(0.0).powi(2);
        let explained = self.explained_rating_variance(e);
        let slack = s2 - explained;
        if slack < -1e-9 * s2.max(1e-12) {
            return Err(Error::DominanceViolated {
                line: e.to_string(),
                detail: format!("bᵀΣ⁻¹b = {explained:.6e} exceeds σ² = {s2:.6e}"),
            });
        }
        Ok(slack.max(0.0).sqrt())
    }

    /// `Cov(ω, κ̇ᵀς) = Σ_ως κ̇` for a combination `κ̇` of ambient errors.
    pub fn omega_cov_with(&self, kappa: &DVector<f64>) -> DVector<f64> {
        &self.sigma_omega_varsigma * kappa
    }

    /// Left and right sides of the multi-period dominance condition
    /// `cᵀΣ_ω⁻¹c ≤ κ̇ᵀΣ_ςκ̇` with `c = Σ_ως κ̇`.
    pub fn thermal_dominance(&self, kappa: &DVector<f64>) -> (f64, f64) {
        let c = self.omega_cov_with(kappa);
        let lhs = (&self.sigma_omega_inv_sqrt * c).norm_squared();
        let rhs = kappa.dot(&(&self.sigma_varsigma * kappa));
        (lhs, rhs)
    }
}

/// Symmetric square root and inverse square root of a PSD matrix. Adds
/// `RIDGE` to the spectrum when the smallest eigenvalue is below it.
pub fn sqrt_and_inv_sqrt(s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, bool) {
    let n = s.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), false);
    }
    let eig = SymmetricEigen::new(s.clone());
    let ridged = eig.eigenvalues.min() < RIDGE;
    if ridged {
        log::debug!("wind covariance near-singular (min eigenvalue {:.3e}), ridge {RIDGE} added", eig.eigenvalues.min());
    }
    let shift = if ridged { RIDGE } else { 0.0 };
    let q = &eig.eigenvectors;
    let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    let inv = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / (l.max(0.0) + shift).sqrt()));
    let sqrt = q * DMatrix::from_diagonal(&root) * q.transpose();
    let inv_sqrt = q * DMatrix::from_diagonal(&inv) * q.transpose();
    (symmetrize(sqrt), symmetrize(inv_sqrt), ridged)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Assembles the covariances of one period. `rating_std_override[e]`
/// replaces the derived `σ_le` of line `e` when present.
pub fn assemble_covariance(
    model: &AmbientErrorModel,
    sens: &SensitivitySet,
    rating_std_override: &[Option<f64>],
) -> Result<JointCovariance> {
    let dim = model.dim();
    let check = |v: &DVector<f64>, what: &str| -> Result<()> {
        if v.len() == dim {
            Ok(())
        } else {
            Err(Error::IndexMismatch(format!("{what} has length {}, ambient vector has {dim}", v.len())))
        }
    };
    for g in &sens.gamma_w {
        check(g, "wind gradient")?;
    }
    if rating_std_override.len() != sens.gamma_f.len() {
        return Err(Error::IndexMismatch(format!(
            "{} rating overrides for {} lines",
            rating_std_override.len(),
            sens.gamma_f.len()
        )));
    }
    let sigma = &model.sigma_varsigma;
    let m = sens.gamma_w.len();
    let mut gw = DMatrix::zeros(dim, m);
    for (k, g) in sens.gamma_w.iter().enumerate() {
        gw.set_column(k, &(-g));
    }
    let sigma_omega = symmetrize(gw.transpose() * sigma * &gw);
    let sigma_big_omega = sigma_omega.sum().max(0.0);
    let sigma_omega_varsigma = gw.transpose() * sigma;
    let mut b_omega_e = Vec::with_capacity(sens.gamma_f.len());
    let mut sigma_le = Vec::with_capacity(sens.gamma_f.len());
    for (e, gf) in sens.gamma_f.iter().enumerate() {
        match gf {
            Some(g) => {
                check(g, "rating gradient")?;
                b_omega_e.push(Some(&sigma_omega_varsigma * g));
                let derived = g.dot(&(sigma * g)).max(0.0).sqrt();
                sigma_le.push(Some(rating_std_override[e].unwrap_or(derived)));
            }
            None => {
                b_omega_e.push(None);
                sigma_le.push(None);
            }
        }
    }
    let n_lines = sens.gamma_f.len();
    let mut sigma_xi = DMatrix::zeros(n_lines, n_lines);
    for (e, ge) in sens.gamma_f.iter().enumerate() {
        let Some(ge) = ge else { continue };
        let sg = sigma * ge;
        for (e2, g2) in sens.gamma_f.iter().enumerate() {
            if let Some(g2) = g2 {
                sigma_xi[(e, e2)] = if e == e2 { sigma_le[e].unwrap_or(0.0).powi(2) } else { g2.dot(&sg) };
            }
        }
    }
    let sigma_xi = symmetrize(sigma_xi);
    let (sigma_omega_sqrt, sigma_omega_inv_sqrt, ridged) = sqrt_and_inv_sqrt(&sigma_omega);
    Ok(JointCovariance {
        sigma_omega,
        sigma_big_omega,
        b_omega_e,
        sigma_le,
        sigma_xi,
        sigma_omega_varsigma,
        sigma_varsigma: sigma.clone(),
        gamma_mu: sens.gamma_mu.clone(),
        sigma_omega_sqrt,
        sigma_omega_inv_sqrt,
        ridged,
    })
}

/// Per-line outcome of the single-period dominance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub edge: usize,
    pub explained_variance: f64,
    pub rating_variance: f64,
    pub ok: bool,
}

/// Checks `bᵀΣ_ω⁻¹b ≤ σ_le²` on every dynamic line.
pub fn validate_dominance(jc: &JointCovariance) -> Vec<DominanceReport> {
    (0..jc.b_omega_e.len())
        .filter(|&e| jc.b_omega_e[e].is_some())
        .map(|e| {
            let explained = jc.explained_rating_variance(e);
            let s2 = jc.sigma_le[e].unwrap_or(0.0).powi(2);
            DominanceReport {
                edge: e,
                explained_variance: explained,
                rating_variance: s2,
                ok: explained <= s2 + 1e-9 * s2.max(1e-12),
            }
        })
        .collect()
}

/// Fails with `DominanceViolated` on the first violating line.
pub fn require_dominance(jc: &JointCovariance, edge_ids: &[String]) -> Result<()> {
    for r in validate_dominance(jc) {
        if !r.ok {
            return Err(Error::DominanceViolated {
                line: edge_ids.get(r.edge).cloned().unwrap_or_else(|| r.edge.to_string()),
                detail: format!(
                    "bᵀΣ⁻¹b = {:.6e} exceeds σ² = {:.6e}",
                    r.explained_variance, r.rating_variance
                ),
            });
        }
    }
    Ok(())
}

/// Per-period covariances of a whole case.
pub fn case_covariances(case: &SystemCase) -> Result<Vec<JointCovariance>> {
    let model = AmbientErrorModel::from_case(case)?;
    let overrides: Vec<Option<f64>> = case
        .edges
        .iter()
        .map(|e| case.rating_error_std_mw.get(&e.id).copied())
        .collect();
    (0..case.horizon)
        .map(|t| assemble_covariance(&model, &sensitivities(case, &model, t)?, &overrides))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn spec(sites: usize, std: [f64; 3], cross: Option<f64>) -> AmbientErrors {
        AmbientErrors {
            sites: (0..sites).map(|k| format!("s{k}")).collect(),
            std,
            within_site_correlation: Some([[1.0, 0.2, -0.3], [0.2, 1.0, 0.0], [-0.3, 0.0, 1.0]]),
            cross_site_correlation: cross.map(|r| {
                (0..sites).map(|i| (0..sites).map(|j| if i == j { 1.0 } else { r }).collect()).collect()
            }),
            dense_covariance: None,
        }
    }

    #[test]
    fn wind_power_cubic_law() {
        assert_eq!(wind_power(1.2, 1e4, 0.0), 0.0);
        assert_relative_eq!(wind_power(1.225, 1e4, 8.0), 3.136, max_relative = 1e-12);
        assert_relative_eq!(wind_power(1.225, 1e4, 16.0), 8.0 * 3.136, max_relative = 1e-12);
        assert_eq!(wind_power_clipped(1.225, 1e4, 16.0, Some(20.0)), 20.0);
    }

    #[test]
    fn wind_gradient_matches_analytic_derivative() {
        let w = WeatherSample {
            wind_speed_m_s: 8.0,
            wind_direction_deg: 70.0,
            ambient_temp_c: 20.0,
            solar_radiation_w_m2: 300.0,
            air_density_kg_m3: 1.225,
        };
        let [g] = ambient_gradient(&w, |s| Ok([wind_power(s.air_density_kg_m3, 1e4, s.wind_speed_m_s)])).unwrap();
        assert_relative_eq!(g[0], 3.0 * 0.5 * 1.225 * 1e4 * 64.0 / 1e6, max_relative = 1e-4);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn block_covariance_structure() {
        let m = AmbientErrorModel::from_spec(&spec(2, [1.0, 10.0, 2.0], Some(0.5))).unwrap();
        assert_eq!(m.dim(), 6);
        assert_relative_eq!(m.sigma_varsigma[(0, 0)], 1.0);
        assert_relative_eq!(m.sigma_varsigma[(0, 1)], 0.2 * 10.0);
        assert_relative_eq!(m.sigma_varsigma[(0, 3)], 0.5);
        assert_relative_eq!(m.sigma_varsigma[(2, 3)], 0.5 * -0.3 * 2.0);
        assert_eq!(m.site_offset("s1"), Some(3));
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let mut s = spec(1, [1.0, 1.0, 1.0], None);
        s.dense_covariance = Some(vec![vec![1.0, 2.0, 0.0], vec![2.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(matches!(AmbientErrorModel::from_spec(&s), Err(Error::Validation(_))));
    }

    fn sens(dim: usize, w: &[&[f64]], f: &[Option<&[f64]>]) -> SensitivitySet {
        SensitivitySet {
            gamma_w: w.iter().map(|v| DVector::from_column_slice(v)).collect(),
            gamma_f: f.iter().map(|v| v.map(DVector::from_column_slice)).collect(),
            gamma_mu: f.iter().map(|_| Some([0, 1, 2, 3].map(|_| DVector::zeros(dim)))).collect(),
        }
    }

    #[test]
    fn zero_covariance_gives_zero_outputs() {
        let m = AmbientErrorModel::zero(vec!["a".into()]);
        let s = sens(3, &[&[1.0, 0.0, 0.0]], &[Some(&[2.0, 0.5, -1.0])]);
        let jc = assemble_covariance(&m, &s, &[None]).unwrap();
        assert_eq!(jc.sigma_omega.amax(), 0.0);
        assert_eq!(jc.sigma_big_omega, 0.0);
        assert_eq!(jc.b_omega_e[0].as_ref().unwrap().amax(), 0.0);
        assert_eq!(jc.sigma_le[0], Some(0.0));
        assert!(jc.ridged);
        assert!(validate_dominance(&jc).iter().all(|r| r.ok));
    }

    #[test]
    fn diagonal_single_site_block_algebra() {
        let m = AmbientErrorModel {
            sigma_varsigma: DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 4.0, 1.5])),
            sites: vec!["a".into()],
        };
        let gw = [2.0, 0.0, 0.0];
        let gf = [3.0, 0.1, -2.0];
        let jc = assemble_covariance(&m, &sens(3, &[&gw], &[Some(&gf)]), &[None]).unwrap();
        assert_relative_eq!(jc.sigma_omega[(0, 0)], 4.0 * 0.5);
        assert_relative_eq!(jc.b_omega_e[0].as_ref().unwrap()[0], -(2.0 * 0.5 * 3.0));
        assert_relative_eq!(jc.sigma_le[0].unwrap().powi(2), 0.5 * 9.0 + 4.0 * 0.01 + 1.5 * 4.0, max_relative = 1e-12);
        let joint = jc.sigma_omega_xi();
        assert_eq!(joint.shape(), (2, 2));
        assert_relative_eq!(joint[(0, 1)], -3.0);
    }

    #[test]
    fn dominance_fails_only_with_overrides() {
        let m = AmbientErrorModel::from_spec(&spec(1, [1.0, 5.0, 2.0], None)).unwrap();
        let s = sens(3, &[&[1.0, 0.0, 0.0]], &[Some(&[2.0, 0.1, -1.0])]);
        let jc = assemble_covariance(&m, &s, &[None]).unwrap();
        assert!(validate_dominance(&jc)[0].ok);
        let jc = assemble_covariance(&m, &s, &[Some(0.0)]).unwrap();
        assert!(!validate_dominance(&jc)[0].ok);
        assert!(matches!(require_dominance(&jc, &["l1".into()]), Err(Error::DominanceViolated { .. })));
        assert!(matches!(jc.rating_tail(0), Err(Error::DominanceViolated { .. })));
        let independent = sens(3, &[&[1.0, 0.0, 0.0]], &[Some(&[0.0, 0.0, 0.0])]);
        let jc = assemble_covariance(&m, &independent, &[Some(0.0)]).unwrap();
        assert!(validate_dominance(&jc)[0].ok);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let m = AmbientErrorModel::zero(vec!["a".into()]);
        let s = sens(3, &[&[1.0, 0.0]], &[]);
        assert!(matches!(assemble_covariance(&m, &s, &[]), Err(Error::IndexMismatch(_))));
    }

    #[test]
    fn correlated_sites_match_sample_covariance() {
        let m = AmbientErrorModel::from_spec(&spec(2, [1.2, 8.0, 1.5], Some(0.6))).unwrap();
        let s = sens(
            6,
            &[&[0.9, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.4, 0.0, 0.0]],
            &[Some(&[4.0, 0.2, -1.5, 0.0, 0.0, 0.0]), Some(&[0.0, 0.0, 0.0, 6.0, 0.1, -2.0])],
        );
        let jc = assemble_covariance(&m, &s, &[None, None]).unwrap();
        let joint = jc.sigma_omega_xi();
        let l = m.sigma_varsigma.clone().cholesky().unwrap().l();
        let mut map = DMatrix::zeros(6, 4);
        map.set_column(0, &(-&s.gamma_w[0]));
        map.set_column(1, &(-&s.gamma_w[1]));
        map.set_column(2, s.gamma_f[0].as_ref().unwrap());
        map.set_column(3, s.gamma_f[1].as_ref().unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut acc = DMatrix::<f64>::zeros(4, 4);
        let mut var_acc = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            let z = DVector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
            let x = map.transpose() * (&l * z);
            let outer = &x * x.transpose();
            var_acc += outer.component_mul(&outer);
            acc += outer;
        }
        acc /= n as f64;
        var_acc /= n as f64;
        for i in 0..4 {
            for j in 0..4 {
                let se = ((var_acc[(i, j)] - acc[(i, j)].powi(2)).max(0.0) / n as f64).sqrt();
                assert!((acc[(i, j)] - joint[(i, j)]).abs() <= 3.0 * se + 1e-12, "({i},{j}) {} vs {}", acc[(i, j)], joint[(i, j)]);
            }
        }
    }

    proptest! {
        #[test]
        fn assembled_covariances_are_symmetric_psd(
            std in prop::array::uniform3(0.0f64..3.0),
            rho in -0.4f64..0.9,
            gw in prop::collection::vec(-2.0f64..2.0, 6),
            gf in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let m = AmbientErrorModel::from_spec(&spec(2, std, Some(rho))).unwrap();
            let w0 = [gw[0], gw[1], gw[2], 0.0, 0.0, 0.0];
            let w1 = [0.0, 0.0, 0.0, gw[3], gw[4], gw[5]];
            let s = sens(6, &[&w0, &w1], &[Some(&gf)]);
            let jc = assemble_covariance(&m, &s, &[None]).unwrap();
            let joint = jc.sigma_omega_xi();
            prop_assert!((&joint - joint.transpose()).amax() == 0.0);
            let scale = joint.amax().max(1.0);
            prop_assert!(SymmetricEigen::new(joint).eigenvalues.min() >= -1e-10 * scale);
            prop_assert!(validate_dominance(&jc).iter().all(|r| r.ok));
            let tail = jc.rating_tail(0).unwrap();
            prop_assert!(tail >= 0.0);
            let kappa = DVector::from_column_slice(&gf);
            let (lhs, rhs) = jc.thermal_dominance(&kappa);
            prop_assert!(lhs <= rhs + 1e-7 * rhs.max(1.0));
        }
    }
}
