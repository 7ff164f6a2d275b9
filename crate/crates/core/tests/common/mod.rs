//! Shared fixtures and synthetic weather for integration tests.
#![allow(dead_code)]

use std::f64::consts::{PI, TAU};
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dlrm_core::grid::{load_case, SystemCase};
use dlrm_core::thermal::{self, ConductorSpec, WeatherSample};

pub const FIXTURES: [&str; 5] = [
    "three_bus_congested.json",
    "three_bus_transient.json",
    "three_bus_deterministic.json",
    "three_bus_late_peak.json",
    "two_node.json",
];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture(name: &str) -> SystemCase {
    load_case(fixture_path(name)).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub enum Season {
    Winter,
    SpringFall,
    Summer,
}

pub const SEASONS: [Season; 3] = [Season::Winter, Season::SpringFall, Season::Summer];

/// 24 h of quarter-hourly weather with diurnal cycles in ambient
/// temperature, wind and sun.
pub fn seasonal_profile(season: Season) -> Vec<WeatherSample> {
    let (t_mean, t_swing, v_mean, v_swing, sun_peak, sunrise, day_len, rho) = match season {
        Season::Winter => (-2.0, 4.0, 4.0, 1.5, 500.0, 7.5, 9.0, 1.27),
        Season::SpringFall => (14.0, 6.0, 2.5, 1.0, 800.0, 6.5, 12.0, 1.2),
        Season::Summer => (30.0, 5.0, 2.0, 0.8, 1000.0, 6.0, 13.0, 1.13),
    };
    (0..96)
        .map(|k| {
            let h = k as f64 / 4.0;
            WeatherSample {
                wind_speed_m_s: v_mean + v_swing * (h / 24.0 * 2.0 * TAU + 1.0).sin(),
                wind_direction_deg: 60.0 + 20.0 * (h / 24.0 * TAU).sin(),
                ambient_temp_c: t_mean + t_swing * ((h - 9.0) / 24.0 * TAU).sin(),
                solar_radiation_w_m2: (sun_peak * ((h - sunrise) / day_len * PI).sin()).max(0.0),
                air_density_kg_m3: rho,
            }
        })
        .collect()
}

/// Slow Gaussian random walk of the loading fraction, clamped to
/// `[0.1, 1.0]` of the steady rating of each period.
pub fn random_flows(spec: &ConductorSpec, weather: &[WeatherSample], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = Normal::new(0.0, 0.15).unwrap();
    let mut cum = 0.0f64;
    weather
        .iter()
        .map(|w| {
            cum += step.sample(rng);
            let x = (0.5 + 0.4 * cum / 3.0).clamp(0.1, 1.0);
            x * thermal::steady_state_rating(spec, w, spec.max_temp_c).unwrap()
        })
        .collect()
}

/// Outcome of comparing the one-step map with the nonlinear integrator
/// along flow trajectories.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoundStats {
    pub boundaries: usize,
    /// Boundaries where the map falls below the integrator.
    pub violations: usize,
    /// Steps at which both sufficient conditions hold.
    pub conditioned_steps: usize,
    pub conditioned_violations: usize,
    pub abs_error_sum: f64,
    pub max_error: f64,
}

impl BoundStats {
    pub fn mae(&self) -> f64 {
        self.abs_error_sum / self.boundaries.max(1) as f64
    }
}

/// Propagates the one-step map along `flows` from the integrator's initial
/// temperature and compares it with the fine-step integration at every
/// boundary.
pub fn compare_trajectory(spec: &ConductorSpec, weather: &[WeatherSample], flows: &[f64], t0: f64, stats: &mut BoundStats) {
    let exact = thermal::integrate_transient(spec, weather, flows, t0, 900.0, 60.0).unwrap();
    let mut bound = t0;
    for (k, (w, &f)) in weather.iter().zip(flows).enumerate() {
        let c = thermal::evolution_coefficients(spec, w, 900.0).unwrap();
        let conditioned = thermal::check_theorem1_conditions(spec, w, exact[k], spec.mw_to_amps(f))
            .map(|r| r.both_ok())
            .unwrap_or(false);
        // Per-step bound from the true temperature, for the conditioned count.
        let one_step = thermal::step_temperature(&c, exact[k], f);
        if conditioned {
            stats.conditioned_steps += 1;
            stats.conditioned_violations += (one_step < exact[k + 1] - 1e-9) as usize;
        }
        bound = thermal::step_temperature(&c, bound, f);
        let err = bound - exact[k + 1];
        stats.boundaries += 1;
        stats.violations += (err < -1e-9) as usize;
        stats.abs_error_sum += err.abs();
        stats.max_error = stats.max_error.max(err.abs());
    }
}
