//! Conductor heat balance, steady-state dynamic ratings and the conservative
//! one-step temperature map used by the market models.
//!
//! All internal quantities are SI (W/m, °C, A). Flows cross the module
//! boundary in MW and are converted through the conductor voltage, so that
//! `P[MW] = V[kV] · I[A] / 1000`.
//!
//! Convection follows the usual forced/natural correlation pair: the larger of
//! the low- and high-Reynolds forced correlations (with the wind-angle factor)
//! and natural convection, with forced convection ignored below 0.1 m/s. The
//! heat balance evaluates air properties at the film temperature
//! `(T_c + T_a)/2`. Ratings and the one-step map evaluate them at the ambient
//! temperature, which slightly understates cooling and keeps both consistent
//! with each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stefan-Boltzmann constant, W/(m²·K⁴).
pub const STEFAN_BOLTZMANN: f64 = 5.670374419e-8;

const KELVIN: f64 = 273.0;
const FORCED_MIN_WIND: f64 = 0.1;
const NATURAL_FLOOR_DT: f64 = 1.0;

/// Physical parameters of an overhead conductor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductorSpec {
    pub diameter_m: f64,
    pub solar_absorptivity: f64,
    pub emissivity: f64,
    pub resistance_ref_ohm_per_m: f64,
    pub temperature_ref_c: f64,
    /// Resistance at ambient temperature. Derived from the reference
    /// resistance when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resistance_ambient_ohm_per_m: Option<f64>,
    pub temp_coeff_resistance_per_c: f64,
    pub heat_capacity_j_per_m_c: f64,
    pub max_temp_c: f64,
    pub voltage_kv: f64,
}

impl ConductorSpec {
    /// 795 kcmil 26/7 ACSR "Drake" on a 100 kV equivalent circuit.
    pub fn drake() -> Self {
        ConductorSpec {
            diameter_m: 0.02814,
            solar_absorptivity: 0.8,
            emissivity: 0.8,
            resistance_ref_ohm_per_m: 7.283e-5,
            temperature_ref_c: 25.0,
            resistance_ambient_ohm_per_m: None,
            temp_coeff_resistance_per_c: 0.00386,
            heat_capacity_j_per_m_c: 1310.0,
            max_temp_c: 100.0,
            voltage_kv: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("diameter_m", self.diameter_m),
            ("solar_absorptivity", self.solar_absorptivity),
            ("emissivity", self.emissivity),
            ("resistance_ref_ohm_per_m", self.resistance_ref_ohm_per_m),
            ("temp_coeff_resistance_per_c", self.temp_coeff_resistance_per_c),
            ("heat_capacity_j_per_m_c", self.heat_capacity_j_per_m_c),
            ("max_temp_c", self.max_temp_c),
            ("voltage_kv", self.voltage_kv),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPhysicalInput(format!(
                    "conductor {name} must be positive, got {v}"
                )));
            }
        }
        if !self.temperature_ref_c.is_finite() {
            return Err(Error::NonPhysicalInput(
                "conductor temperature_ref_c must be finite".into(),
            ));
        }
        for (name, v) in [
            ("solar_absorptivity", self.solar_absorptivity),
            ("emissivity", self.emissivity),
        ] {
            if v > 1.0 {
                return Err(Error::NonPhysicalInput(format!(
                    "conductor {name} must lie in (0, 1], got {v}"
                )));
            }
        }
        if let Some(ra) = self.resistance_ambient_ohm_per_m {
            if !(ra.is_finite() && ra > 0.0) {
                return Err(Error::NonPhysicalInput(format!(
                    "conductor resistance_ambient_ohm_per_m must be positive, got {ra}"
                )));
            }
        }
        Ok(())
    }

    /// Resistance at ambient temperature `t_a`.
    pub fn resistance_ambient(&self, t_a: f64) -> f64 {
        self.resistance_ambient_ohm_per_m.unwrap_or(
            self.resistance_ref_ohm_per_m * (1.0 + self.temp_coeff_resistance_per_c * (t_a - self.temperature_ref_c)),
        )
    }

    /// Resistance at conductor temperature `t_c` when the air is at `t_a`.
    pub fn resistance(&self, t_c: f64, t_a: f64) -> f64 {
        self.resistance_ambient(t_a)
            + self.temp_coeff_resistance_per_c * self.resistance_ref_ohm_per_m * (t_c - t_a)
    }

    /// Converts a current in A to a flow in MW.
    pub fn amps_to_mw(&self, amps: f64) -> f64 {
        self.voltage_kv * amps / 1000.0
    }

    /// Converts a flow in MW to a current in A.
    pub fn mw_to_amps(&self, mw: f64) -> f64 {
        mw * 1000.0 / self.voltage_kv
    }
}

/// Ambient conditions along a line for one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherSample {
    pub wind_speed_m_s: f64,
    /// Angle between wind and conductor axis, degrees.
    pub wind_direction_deg: f64,
    pub ambient_temp_c: f64,
    pub solar_radiation_w_m2: f64,
    pub air_density_kg_m3: f64,
}

impl WeatherSample {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.wind_speed_m_s,
            self.wind_direction_deg,
            self.ambient_temp_c,
            self.solar_radiation_w_m2,
            self.air_density_kg_m3,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonPhysicalInput("weather sample has non-finite field".into()));
        }
        if self.wind_speed_m_s < 0.0 {
            return Err(Error::NonPhysicalInput(format!(
                "wind speed must be >= 0, got {}",
                self.wind_speed_m_s
            )));
        }
        if self.solar_radiation_w_m2 < 0.0 {
            return Err(Error::NonPhysicalInput(format!(
                "solar radiation must be >= 0, got {}",
                self.solar_radiation_w_m2
            )));
        }
        if self.air_density_kg_m3 <= 0.0 {
            return Err(Error::NonPhysicalInput(format!(
                "air density must be > 0, got {}",
                self.air_density_kg_m3
            )));
        }
        Ok(())
    }
}

/// Heat-balance components at a given conductor state, all in W/m, plus the
/// temperature-independent coefficients of the linearized balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatTerms {
    pub q_s: f64,
    pub q_j: f64,
    pub q_r: f64,
    pub q_c: f64,
    /// Convective coefficient, W/(m²·°C), so that `q_c = πD·h_c·T_x`.
    pub h_c: f64,
    /// Linear radiation coefficient `4σεT_A³`.
    pub h_r0: f64,
    /// Quadratic radiation coefficient `6σεT_A²`.
    pub k1: f64,
}

impl HeatTerms {
    /// Net heating rate `q_s + q_J − q_c − q_r`.
    pub fn net(&self) -> f64 {
        self.q_s + self.q_j - self.q_c - self.q_r
    }
}

fn film_viscosity(t_f: f64) -> f64 {
    1.458e-6 * (t_f + KELVIN).powf(1.5) / (t_f + 383.4)
}

fn film_conductivity(t_f: f64) -> f64 {
    2.424e-2 + 7.477e-5 * t_f - 4.407e-9 * t_f * t_f
}

/// Convective coefficient per unit surface with air properties at `t_f` and a
/// temperature rise `dt` (used only by natural convection).
fn convection_coefficient(spec: &ConductorSpec, w: &WeatherSample, t_f: f64, dt: f64) -> f64 {
    let d = spec.diameter_m;
    let natural = 3.645 * w.air_density_kg_m3.sqrt() * d.powf(0.75) * dt.max(0.0).powf(0.25);
    let forced = if w.wind_speed_m_s >= FORCED_MIN_WIND {
        let re = d * w.air_density_kg_m3 * w.wind_speed_m_s / film_viscosity(t_f);
        let phi = w.wind_direction_deg.to_radians();
        let k_angle = 1.194 - phi.cos() + 0.194 * (2.0 * phi).cos() + 0.368 * (2.0 * phi).sin();
        let k_f = film_conductivity(t_f);
        let low = k_angle * (1.01 + 1.35 * re.powf(0.52)) * k_f;
        let high = k_angle * 0.754 * re.powf(0.6) * k_f;
        low.max(high)
    } else {
        0.0
    };
    forced.max(natural) / (std::f64::consts::PI * d)
}

fn radiation_coefficient(spec: &ConductorSpec, t_a: f64, t_x: f64) -> f64 {
    let ta = t_a + KELVIN;
    spec.emissivity
        * STEFAN_BOLTZMANN
        * (4.0 * ta.powi(3) + 6.0 * t_x * ta * ta + 4.0 * t_x * t_x * ta + t_x.powi(3))
}

fn radiation_linear(spec: &ConductorSpec, t_a: f64) -> (f64, f64) {
    let ta = t_a + KELVIN;
    let eps_sigma = spec.emissivity * STEFAN_BOLTZMANN;
    (4.0 * eps_sigma * ta.powi(3), 6.0 * eps_sigma * ta * ta)
}

/// Evaluates the four heat-balance terms at conductor temperature `t_c` and
/// current `amps`.
pub fn heat_terms(spec: &ConductorSpec, w: &WeatherSample, t_c: f64, amps: f64) -> Result<HeatTerms> {
    spec.validate()?;
    w.validate()?;
    if !t_c.is_finite() || t_c < w.ambient_temp_c - 50.0 {
        return Err(Error::NonPhysicalInput(format!(
            "conductor temperature {t_c} is more than 50 °C below ambient {}",
            w.ambient_temp_c
        )));
    }
    if !amps.is_finite() || amps < 0.0 {
        return Err(Error::NonPhysicalInput(format!("current must be >= 0, got {amps}")));
    }
    Ok(heat_terms_unchecked(spec, w, t_c, amps))
}

fn heat_terms_unchecked(spec: &ConductorSpec, w: &WeatherSample, t_c: f64, amps: f64) -> HeatTerms {
    let d = spec.diameter_m;
    let pi_d = std::f64::consts::PI * d;
    let t_a = w.ambient_temp_c;
    let t_x = t_c - t_a;
    let h_c = convection_coefficient(spec, w, 0.5 * (t_c + t_a), t_x);
    let (h_r0, k1) = radiation_linear(spec, t_a);
    HeatTerms {
        q_s: spec.solar_absorptivity * w.solar_radiation_w_m2 * d,
        q_j: spec.resistance(t_c, t_a) * amps * amps,
        q_r: pi_d * radiation_coefficient(spec, t_a, t_x) * t_x,
        q_c: pi_d * h_c * t_x,
        h_c,
        h_r0,
        k1,
    }
}

/// Steady-state ampacity in A at conductor temperature `t_max`.
pub fn steady_state_rating_amps(spec: &ConductorSpec, w: &WeatherSample, t_max: f64) -> Result<f64> {
    spec.validate()?;
    w.validate()?;
    // Negated so that NaN is rejected as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(t_max > w.ambient_temp_c) {
        return Err(Error::NonPhysicalInput(format!(
            "maximum temperature {t_max} must exceed ambient {}",
            w.ambient_temp_c
        )));
    }
    let t_a = w.ambient_temp_c;
    let t_x = t_max - t_a;
    let pi_d = std::f64::consts::PI * spec.diameter_m;
    let h_c = convection_coefficient(spec, w, t_a, t_x);
    let cooling = pi_d * (h_c + radiation_coefficient(spec, t_a, t_x)) * t_x;
    let q_s = spec.solar_absorptivity * w.solar_radiation_w_m2 * spec.diameter_m;
    if cooling <= q_s {
        return Err(Error::InfeasibleRating { cooling, solar: q_s });
    }
    Ok(((cooling - q_s) / spec.resistance(t_max, t_a)).sqrt())
}

/// Steady-state dynamic rating in MW at conductor temperature `t_max`.
pub fn steady_state_rating(spec: &ConductorSpec, w: &WeatherSample, t_max: f64) -> Result<f64> {
    Ok(spec.amps_to_mw(steady_state_rating_amps(spec, w, t_max)?))
}

/// Steady-state conductor temperature carrying `amps`, found by bisection on
/// the net heating rate. Fails with `InfeasibleRating` when no equilibrium
/// exists below 500 °C above ambient.
pub fn steady_state_temperature(spec: &ConductorSpec, w: &WeatherSample, amps: f64) -> Result<f64> {
    let t_a = w.ambient_temp_c;
    let net = |t: f64| heat_terms(spec, w, t, amps).map(|h| h.net());
    let mut lo = t_a;
    let mut hi = t_a + 500.0;
    if net(lo)? <= 0.0 {
        return Ok(lo);
    }
    let top = heat_terms(spec, w, hi, amps)?;
    if top.net() > 0.0 {
        return Err(Error::InfeasibleRating {
            cooling: top.q_c + top.q_r,
            solar: top.q_s + top.q_j,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if net(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Time discretization of the linear comparison dynamics behind the
/// one-step map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Discretization {
    /// Exact solution over the step with inputs held constant.
    #[default]
    Exponential,
    /// Explicit Euler step, `μ^b = 1 − B·δt/mc`.
    ForwardEuler,
}

/// Coefficient of the quartic flow term of the one-step map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuarticTerm {
    /// `α_T·R_ref·k2 − πD·k1·k2²` from the steady approximation `T_x ≈ k2·I²`.
    #[default]
    Linearized,
    /// `(α_T·R_ref)² / (4πD·k1)`, the maximum over `T_x` of the concave
    /// excess `α_T·R_ref·T_x·I² − πD·k1·T_x²`. It bounds the excess for every
    /// state but is loose near the rating.
    Envelope,
}

/// Coefficients of `T_{t+1} = μ^a + μ^b·T_t + μ^c·f² + μ^d·f⁴` (f in MW).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionCoefficients {
    pub mu_a: f64,
    pub mu_b: f64,
    pub mu_c: f64,
    pub mu_d: f64,
    pub dt_s: f64,
}

impl EvolutionCoefficients {
    pub fn as_array(&self) -> [f64; 4] {
        [self.mu_a, self.mu_b, self.mu_c, self.mu_d]
    }
}

/// Constants of the linearized steady balance used by the one-step map.
struct LinearBalance {
    k1: f64,
    /// `πD(h_c + h_r0)`.
    b: f64,
    /// Cooling derivative at the critical temperature.
    m_cr: f64,
    r_max: f64,
    k2: f64,
}

fn linear_balance(spec: &ConductorSpec, w: &WeatherSample) -> LinearBalance {
    let pi_d = std::f64::consts::PI * spec.diameter_m;
    let t_a = w.ambient_temp_c;
    let h_c = convection_coefficient(spec, w, t_a, NATURAL_FLOOR_DT);
    let (h_r0, k1) = radiation_linear(spec, t_a);
    let m_cr = pi_d * (h_c + h_r0 + k1 * (spec.max_temp_c - t_a));
    let r_max = spec.resistance(spec.max_temp_c, t_a);
    LinearBalance {
        k1,
        b: pi_d * (h_c + h_r0),
        m_cr,
        r_max,
        k2: r_max / m_cr,
    }
}

/// One-step temperature map coefficients for a step of `dt_s` seconds.
pub fn evolution_coefficients(spec: &ConductorSpec, w: &WeatherSample, dt_s: f64) -> Result<EvolutionCoefficients> {
    evolution_coefficients_with(spec, w, dt_s, Discretization::Exponential, QuarticTerm::Linearized)
}

pub fn evolution_coefficients_with(
    spec: &ConductorSpec,
    w: &WeatherSample,
    dt_s: f64,
    scheme: Discretization,
    quartic: QuarticTerm,
) -> Result<EvolutionCoefficients> {
    spec.validate()?;
    w.validate()?;
    if !(dt_s.is_finite() && dt_s > 0.0) {
        return Err(Error::NonPhysicalInput(format!("time step must be > 0, got {dt_s}")));
    }
    let pi_d = std::f64::consts::PI * spec.diameter_m;
    let lb = linear_balance(spec, w);
    let mc = spec.heat_capacity_j_per_m_c;
    let (mu_b, gain) = match scheme {
        Discretization::Exponential => {
            let mu_b = (-lb.b * dt_s / mc).exp();
            let gain = -(-lb.b * dt_s / mc).exp_m1() / lb.b;
            (mu_b, gain)
        }
        Discretization::ForwardEuler => {
            let mu_b = 1.0 - lb.b * dt_s / mc;
            if mu_b <= 0.0 {
                return Err(Error::UnstableStep(format!(
                    "explicit step gives mu_b = {mu_b:.4} for dt = {dt_s} s"
                )));
            }
            (mu_b, dt_s / mc)
        }
    };
    let t_a = w.ambient_temp_c;
    let q_s = spec.solar_absorptivity * w.solar_radiation_w_m2 * spec.diameter_m;
    let amps_per_mw = 1000.0 / spec.voltage_kv;
    let art = spec.temp_coeff_resistance_per_c * spec.resistance_ref_ohm_per_m;
    let c4 = match quartic {
        QuarticTerm::Linearized => art * lb.k2 - pi_d * lb.k1 * lb.k2 * lb.k2,
        QuarticTerm::Envelope => art * art / (4.0 * pi_d * lb.k1),
    };
    Ok(EvolutionCoefficients {
        mu_a: (q_s + lb.b * t_a) * gain,
        mu_b,
        mu_c: spec.resistance_ambient(t_a) * gain * amps_per_mw.powi(2),
        mu_d: c4 * gain * amps_per_mw.powi(4),
        dt_s,
    })
}

/// Applies the one-step map to temperature `t_t` with flow `f_mw`.
pub fn step_temperature(c: &EvolutionCoefficients, t_t: f64, f_mw: f64) -> f64 {
    let f2 = f_mw * f_mw;
    c.mu_a + c.mu_b * t_t + c.mu_c * f2 + c.mu_d * f2 * f2
}

/// Diagnostics of the two sufficient conditions for the one-step map to
/// upper-bound the nonlinear dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub f1_value: f64,
    pub f2_value: f64,
    pub df1_dr: f64,
    pub df1_ds: f64,
    pub df2_dt: f64,
    pub df2_di: f64,
    pub condition_static_ok: bool,
    pub condition_transient_ok: bool,
    pub delta_r: f64,
    pub delta_s: f64,
    pub delta_t: f64,
    pub delta_i: f64,
    pub m_cr: f64,
    pub k2: f64,
    pub b1_tilde: f64,
    pub b2_tilde: f64,
    pub b1_hat: f64,
    pub b2_hat: f64,
}

impl ConditionReport {
    pub fn both_ok(&self) -> bool {
        self.condition_static_ok && self.condition_transient_ok
    }
}

/// Evaluates the sufficient conditions at conductor temperature `t_c` and
/// current `amps`.
pub fn check_theorem1_conditions(
    spec: &ConductorSpec,
    w: &WeatherSample,
    t_c: f64,
    amps: f64,
) -> Result<ConditionReport> {
    let h = heat_terms(spec, w, t_c, amps)?;
    if amps == 0.0 {
        return Err(Error::DivisionGuard("conditions undefined at zero current".into()));
    }
    let ta = w.ambient_temp_c + KELVIN;
    let t_x = t_c - w.ambient_temp_c;
    let pi_d = std::f64::consts::PI * spec.diameter_m;
    let delta_r = pi_d * spec.emissivity * STEFAN_BOLTZMANN * (4.0 * t_x * t_x * ta + t_x.powi(3));
    let delta_s = h.q_s / (amps * amps);
    let i_max = steady_state_rating_amps(spec, w, spec.max_temp_c)?;
    Ok(condition_report_from_deltas(
        spec,
        w,
        amps,
        t_x,
        delta_r,
        delta_s,
        spec.max_temp_c - t_c,
        i_max - amps,
    ))
}

/// Condition report for explicit perturbation sizes `Δr, Δs, ΔT, ΔI` around
/// the linearized balance at current `amps` and temperature rise `t_x`.
#[allow(clippy::too_many_arguments)]
pub fn condition_report_from_deltas(
    spec: &ConductorSpec,
    w: &WeatherSample,
    amps: f64,
    t_x: f64,
    delta_r: f64,
    delta_s: f64,
    delta_t: f64,
    delta_i: f64,
) -> ConditionReport {
    let pi_d = std::f64::consts::PI * spec.diameter_m;
    let lb = linear_balance(spec, w);
    let art = spec.temp_coeff_resistance_per_c * spec.resistance_ref_ohm_per_m;
    let i2 = amps * amps;
    let b1_tilde = art * i2 * i2;
    let b2_tilde = pi_d * lb.k1 * i2 * i2;
    let b1_hat = art * i2;
    let b2_hat = pi_d * lb.k1;

    let r = lb.r_max + delta_s;
    let m = lb.m_cr + delta_r;
    let df1_dr = -b1_tilde * r / (m * m) + 2.0 * b2_tilde * r * r / m.powi(3) - t_x;
    let df1_ds = b1_tilde / m - 2.0 * b2_tilde * r / (m * m);
    let f1_value = delta_r * df1_dr + delta_s * df1_ds;

    let i_tot = amps + delta_i;
    let x = lb.k2 * i_tot * i_tot - delta_t;
    let df2_dt = -b1_hat + 2.0 * b2_hat * x;
    let df2_di = 2.0 * lb.k2 * i_tot * (b1_hat - 2.0 * b2_hat * x);
    let f2_value = delta_t * df2_dt + delta_i * df2_di;

    ConditionReport {
        f1_value,
        f2_value,
        df1_dr,
        df1_ds,
        df2_dt,
        df2_di,
        condition_static_ok: f1_value < 0.0,
        condition_transient_ok: f2_value < 0.0,
        delta_r,
        delta_s,
        delta_t,
        delta_i,
        m_cr: lb.m_cr,
        k2: lb.k2,
        b1_tilde,
        b2_tilde,
        b1_hat,
        b2_hat,
    }
}

/// Fine-step integration of the full nonlinear heat balance.
///
/// Weather and flow are held constant over each coarse period of `period_s`
/// seconds, which is split into sub-steps of at most `fine_dt_s` seconds and
/// advanced with classical fourth-order Runge-Kutta. Returns the temperature
/// at every coarse boundary, starting with `t0`.
pub fn integrate_transient(
    spec: &ConductorSpec,
    weather: &[WeatherSample],
    flows_mw: &[f64],
    t0: f64,
    period_s: f64,
    fine_dt_s: f64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if weather.len() != flows_mw.len() {
        return Err(Error::IndexMismatch(format!(
            "{} weather samples for {} flows",
            weather.len(),
            flows_mw.len()
        )));
    }
    if !(fine_dt_s > 0.0 && fine_dt_s <= 60.0) {
        return Err(Error::NonPhysicalInput(format!(
            "fine step must lie in (0, 60] s, got {fine_dt_s}"
        )));
    }
    if !(period_s > 0.0 && period_s.is_finite()) {
        return Err(Error::NonPhysicalInput(format!("period must be > 0, got {period_s}")));
    }
    let n_sub = (period_s / fine_dt_s - 1e-9).ceil().max(1.0) as usize;
    let h = period_s / n_sub as f64;
    let mc = spec.heat_capacity_j_per_m_c;
    let mut out = Vec::with_capacity(weather.len() + 1);
    let mut t = t0;
    out.push(t);
    for (w, &f) in weather.iter().zip(flows_mw) {
        w.validate()?;
        let amps = spec.mw_to_amps(f.abs());
        let rate = |temp: f64| heat_terms_unchecked(spec, w, temp, amps).net() / mc;
        for _ in 0..n_sub {
            let k1 = rate(t);
            let k2 = rate(t + 0.5 * h * k1);
            let k3 = rate(t + 0.5 * h * k2);
            let k4 = rate(t + h * k3);
            let dt = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !dt.is_finite() || dt.abs() > 50.0 {
                return Err(Error::UnstableStep(format!(
                    "temperature change {dt:.3} °C in one {h} s sub-step"
                )));
            }
            t += dt;
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hot_day() -> WeatherSample {
        WeatherSample {
            wind_speed_m_s: 0.61,
            wind_direction_deg: 90.0,
            ambient_temp_c: 40.0,
            solar_radiation_w_m2: 1000.0,
            air_density_kg_m3: 1.029,
        }
    }

    fn summer() -> WeatherSample {
        WeatherSample {
            wind_speed_m_s: 2.0,
            wind_direction_deg: 60.0,
            ambient_temp_c: 30.0,
            solar_radiation_w_m2: 900.0,
            air_density_kg_m3: 1.13,
        }
    }

    fn calm_night(t_a: f64) -> WeatherSample {
        WeatherSample {
            wind_speed_m_s: 0.0,
            wind_direction_deg: 90.0,
            ambient_temp_c: t_a,
            solar_radiation_w_m2: 0.0,
            air_density_kg_m3: 1.2,
        }
    }

    #[test]
    fn no_temperature_rise_means_no_losses() {
        let spec = ConductorSpec::drake();
        let h = heat_terms(&spec, &calm_night(20.0), 20.0, 0.0).unwrap();
        assert_eq!((h.q_s, h.q_j, h.q_r, h.q_c), (0.0, 0.0, 0.0, 0.0));

        let h = heat_terms(&spec, &calm_night(20.0), 20.0, 500.0).unwrap();
        assert_relative_eq!(h.q_j, spec.resistance_ambient(20.0) * 500.0 * 500.0);
        assert_eq!((h.q_s, h.q_r, h.q_c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn heat_terms_match_scalar_oracle() {
        let h = heat_terms(&ConductorSpec::drake(), &hot_day(), 100.0, 1000.0).unwrap();
        assert_relative_eq!(h.q_s, 22.512, max_relative = 1e-12);
        assert_relative_eq!(h.q_j, 93.914285, max_relative = 1e-12);
        assert_relative_eq!(h.q_r, 39.13622625154988, max_relative = 1e-12);
        assert_relative_eq!(h.q_c, 82.094401450808, max_relative = 1e-12);
    }

    #[test]
    fn rating_matches_scalar_oracle() {
        let spec = ConductorSpec::drake();
        let amps = steady_state_rating_amps(&spec, &hot_day(), 100.0).unwrap();
        assert_relative_eq!(amps, 1006.8852965565894, max_relative = 1e-12);
        let mw = steady_state_rating(&spec, &summer(), 100.0).unwrap();
        assert_relative_eq!(mw, 143.13024115560083, max_relative = 1e-12);
    }

    #[test]
    fn rating_rises_with_wind_and_fails_under_extreme_sun() {
        let spec = ConductorSpec::drake();
        let w = summer();
        let faster = WeatherSample { wind_speed_m_s: 2.0 * w.wind_speed_m_s, ..w };
        assert!(steady_state_rating(&spec, &faster, 100.0).unwrap() > steady_state_rating(&spec, &w, 100.0).unwrap());

        let scorching = WeatherSample { solar_radiation_w_m2: 1e6, ..w };
        assert!(matches!(
            steady_state_rating(&spec, &scorching, 100.0),
            Err(Error::InfeasibleRating { .. })
        ));
    }

    #[test]
    fn rejects_nonphysical_inputs() {
        let spec = ConductorSpec::drake();
        let w = summer();
        assert!(matches!(heat_terms(&spec, &w, w.ambient_temp_c - 60.0, 0.0), Err(Error::NonPhysicalInput(_))));
        assert!(matches!(heat_terms(&spec, &w, 50.0, -1.0), Err(Error::NonPhysicalInput(_))));
        let bad = WeatherSample { air_density_kg_m3: 0.0, ..w };
        assert!(matches!(heat_terms(&spec, &bad, 50.0, 0.0), Err(Error::NonPhysicalInput(_))));
        let bad_spec = ConductorSpec { emissivity: 1.5, ..spec };
        assert!(matches!(heat_terms(&bad_spec, &w, 50.0, 0.0), Err(Error::NonPhysicalInput(_))));
    }

    #[test]
    fn coefficients_match_scalar_oracle() {
        let c = evolution_coefficients(&ConductorSpec::drake(), &summer(), 900.0).unwrap();
        assert_relative_eq!(c.mu_a, 31.8833148748402, max_relative = 1e-12);
        assert_relative_eq!(c.mu_b, 0.14035342646614557, max_relative = 1e-12);
        assert_relative_eq!(c.mu_c, 0.002232812871556053, max_relative = 1e-12);
        assert_relative_eq!(c.mu_d, 1.990122411672216e-08, max_relative = 1e-12);
        assert!(c.mu_c >= 0.0 && c.mu_b > 0.0 && c.mu_b < 1.0);
    }

    #[test]
    fn coefficients_vanish_with_the_step() {
        let spec = ConductorSpec::drake();
        for scheme in [Discretization::Exponential, Discretization::ForwardEuler] {
            let c = evolution_coefficients_with(&spec, &summer(), 1e-9, scheme, QuarticTerm::Linearized).unwrap();
            assert!(c.mu_a.abs() < 1e-9 && c.mu_c.abs() < 1e-12 && c.mu_d.abs() < 1e-12);
            assert_relative_eq!(c.mu_b, 1.0, epsilon = 1e-9);
            assert_relative_eq!(step_temperature(&c, 63.0, 120.0), 63.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn explicit_scheme_reports_unstable_steps() {
        let spec = ConductorSpec::drake();
        let r = evolution_coefficients_with(&spec, &summer(), 900.0, Discretization::ForwardEuler, QuarticTerm::Linearized);
        assert!(matches!(r, Err(Error::UnstableStep(_))));
        assert!(evolution_coefficients_with(&spec, &summer(), 60.0, Discretization::ForwardEuler, QuarticTerm::Linearized).is_ok());
    }

    #[test]
    fn step_without_flow_or_offset_scales_temperature() {
        let c = EvolutionCoefficients { mu_a: 0.0, mu_b: 0.7, mu_c: 0.01, mu_d: 1e-6, dt_s: 900.0 };
        assert_eq!(step_temperature(&c, 40.0, 0.0), 28.0);
    }

    #[test]
    fn condition_sums_vanish_without_perturbation() {
        let spec = ConductorSpec::drake();
        let r = condition_report_from_deltas(&spec, &summer(), 800.0, 40.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(r.f1_value, 0.0);
        assert_eq!(r.f2_value, 0.0);
        assert!(!r.condition_static_ok && !r.condition_transient_ok);
    }

    #[test]
    fn conditions_guard_zero_current() {
        let r = check_theorem1_conditions(&ConductorSpec::drake(), &summer(), 60.0, 0.0);
        assert!(matches!(r, Err(Error::DivisionGuard(_))));
    }

    #[test]
    fn static_sum_is_dominated_by_the_rise_at_large_temperatures() {
        let spec = ConductorSpec::drake();
        let w = summer();
        let r = check_theorem1_conditions(&spec, &w, w.ambient_temp_c + 200.0, 800.0).unwrap();
        assert!(r.delta_r > 0.0 && r.delta_s > 0.0);
        assert_relative_eq!(r.df1_dr, -200.0, max_relative = 0.01);
        assert_relative_eq!(r.f1_value, -45.1, max_relative = 0.01);
        assert!(r.condition_static_ok);
    }

    #[test]
    fn zero_flow_at_ambient_stays_at_ambient() {
        let spec = ConductorSpec::drake();
        let ws = vec![calm_night(15.0); 8];
        let out = integrate_transient(&spec, &ws, &[0.0; 8], 15.0, 900.0, 60.0).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|t| *t == 15.0));
    }

    #[test]
    fn constant_flow_converges_to_steady_state() {
        let spec = ConductorSpec::drake();
        let w = summer();
        let f = 0.8 * steady_state_rating(&spec, &w, 100.0).unwrap();
        let target = steady_state_temperature(&spec, &w, spec.mw_to_amps(f)).unwrap();
        let out = integrate_transient(&spec, &[w; 24], &[f; 24], w.ambient_temp_c, 900.0, 60.0).unwrap();
        assert!(out.windows(2).all(|p| p[1] >= p[0]));
        assert!(out.iter().all(|t| *t <= target + 1e-9));
        assert_relative_eq!(*out.last().unwrap(), target, epsilon = 1e-6);
        let h = heat_terms(&spec, &w, target, spec.mw_to_amps(f)).unwrap();
        assert!(h.net().abs() < 1e-8);
    }

    #[test]
    fn integrator_checks_its_inputs() {
        let spec = ConductorSpec::drake();
        let w = summer();
        assert!(matches!(integrate_transient(&spec, &[w, w], &[1.0], 40.0, 900.0, 60.0), Err(Error::IndexMismatch(_))));
        assert!(matches!(integrate_transient(&spec, &[w], &[1.0], 40.0, 900.0, 120.0), Err(Error::NonPhysicalInput(_))));
        let tiny = ConductorSpec { heat_capacity_j_per_m_c: 1e-3, ..spec };
        assert!(matches!(integrate_transient(&tiny, &[w], &[100.0], 40.0, 900.0, 60.0), Err(Error::UnstableStep(_))));
    }

    fn weather() -> impl Strategy<Value = WeatherSample> {
        (0.5f64..8.0, 10.0f64..90.0, -10.0f64..40.0, 0.0f64..1000.0, 1.0f64..1.3).prop_map(|(v, phi, ta, qs, rho)| WeatherSample {
            wind_speed_m_s: v,
            wind_direction_deg: phi,
            ambient_temp_c: ta,
            solar_radiation_w_m2: qs,
            air_density_kg_m3: rho,
        })
    }

    fn forced_weather() -> impl Strategy<Value = WeatherSample> {
        (weather(), 1.0f64..8.0, 45.0f64..90.0, 10.0f64..40.0).prop_map(|(w, v, phi, ta)| WeatherSample {
            wind_speed_m_s: v,
            wind_direction_deg: phi,
            ambient_temp_c: ta,
            ..w
        })
    }

    proptest! {
        #[test]
        fn rating_is_monotone_in_wind_and_ambient(w in weather(), dv in 0.0f64..3.0, dta in 0.0f64..10.0) {
            let spec = ConductorSpec::drake();
            let base = steady_state_rating(&spec, &w, 100.0).unwrap();
            let windier = WeatherSample { wind_speed_m_s: w.wind_speed_m_s + dv, ..w };
            let warmer = WeatherSample { ambient_temp_c: w.ambient_temp_c + dta, ..w };
            prop_assert!(steady_state_rating(&spec, &windier, 100.0).unwrap() >= base);
            prop_assert!(steady_state_rating(&spec, &warmer, 100.0).unwrap() <= base);
        }

        #[test]
        fn rated_flow_at_the_limit_is_a_fixed_point(w in forced_weather(), dt in prop::sample::select(vec![300.0, 900.0])) {
            let spec = ConductorSpec::drake();
            let f = steady_state_rating(&spec, &w, spec.max_temp_c).unwrap();
            let c = evolution_coefficients(&spec, &w, dt).unwrap();
            let next = step_temperature(&c, spec.max_temp_c, f);
            prop_assert!((next - spec.max_temp_c).abs() <= 0.02 * (spec.max_temp_c - w.ambient_temp_c));
        }

        #[test]
        fn heat_terms_are_continuous(w in weather(), rise in 1.0f64..80.0, amps in 0.0f64..1200.0, which in 0usize..7, sign in prop::bool::ANY) {
            let spec = ConductorSpec::drake();
            let t_c = w.ambient_temp_c + rise;
            let base = heat_terms(&spec, &w, t_c, amps).unwrap();
            let eps = if sign { 1e-9 } else { -1e-9 };
            let mut v = [w.wind_speed_m_s, w.wind_direction_deg, w.ambient_temp_c, w.solar_radiation_w_m2, w.air_density_kg_m3, t_c, amps];
            v[which] *= 1.0 + eps;
            let w2 = WeatherSample { wind_speed_m_s: v[0], wind_direction_deg: v[1], ambient_temp_c: v[2], solar_radiation_w_m2: v[3], air_density_kg_m3: v[4] };
            let moved = heat_terms(&spec, &w2, v[5], v[6]).unwrap();
            let scale = base.q_s.abs() + base.q_j.abs() + base.q_r.abs() + base.q_c.abs();
            for (a, b) in [(base.q_s, moved.q_s), (base.q_j, moved.q_j), (base.q_r, moved.q_r), (base.q_c, moved.q_c), (base.h_c, moved.h_c)] {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3 * scale));
            }
        }

        #[test]
        fn one_step_map_bounds_the_nonlinear_dynamics(w in weather(), rise in 0.0f64..60.0, load in 0.05f64..1.0) {
            let spec = ConductorSpec::drake();
            let t_c = (w.ambient_temp_c + rise).min(spec.max_temp_c - 1.0);
            let f = load * steady_state_rating(&spec, &w, spec.max_temp_c).unwrap();
            let c = evolution_coefficients(&spec, &w, 900.0).unwrap();
            let exact = integrate_transient(&spec, &[w], &[f], t_c, 900.0, 60.0).unwrap()[1];
            prop_assert!(step_temperature(&c, t_c, f) >= exact - 1e-9);
        }
    }
}
