//! End-to-end runs of the `dlrm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlrm_cli::{compare, read_summary, run, Horizon, RunConfig};
use dlrm_core::market_single::RatingMode;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn dlrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlrm")).args(args).output().expect("binary runs")
}

const ARTIFACTS: [&str; 7] =
    ["dispatch.csv", "prices.csv", "emissions.csv", "thermal.csv", "duals.json", "validation.json", "summary.json"];

#[test]
fn run_writes_every_artifact_and_orders_costs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = dlrm(&["run", "--case", fixture("three_bus_congested.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ARTIFACTS {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let s = read_summary(&out).unwrap();
    let cost = |m: RatingMode| s.runs.iter().find(|r| r.mode == m).unwrap().cost;
    assert!(cost(RatingMode::Dlr) <= cost(RatingMode::Slr));
    assert!(cost(RatingMode::CcDlr) <= cost(RatingMode::Slr));
    assert!(cost(RatingMode::CcDlr) >= cost(RatingMode::Dlr));
    let dlr = s.runs.iter().find(|r| r.mode == RatingMode::Dlr).unwrap();
    assert!(dlr.cost_delta_pct_vs_slr.unwrap() < 0.0);
    assert!(s.runs.iter().all(|r| r.equilibrium_max_gap <= 1e-4));
}

#[test]
fn missing_weather_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dlrm(&[
        "run",
        "--case",
        fixture("three_bus_congested.json").to_str().unwrap(),
        "--weather",
        "/definitely/missing/weather.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["path"], "/definitely/missing/weather.csv");
    assert_eq!(err["error"], "Io");
}

#[test]
fn invalid_case_exits_2_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 1}").unwrap();
    let o = dlrm(&["run", "--case", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "SchemaError");
}

#[test]
fn validation_rates_stay_within_epsilon_margin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { validate: true, ..RunConfig::new(fixture("three_bus_congested.json"), dir.path()) };
    let s = run(&cfg).unwrap();
    for r in &s.runs {
        assert!(r.max_violation_rate.unwrap() <= cfg.epsilon + 0.01, "{:?}", r);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("validation.json")).unwrap()).unwrap();
    assert!(!v["cc-dlr"][0]["rows"].as_array().unwrap().is_empty());
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |sub: &str| RunConfig {
        validate: true,
        samples: 10_000,
        seed: 7,
        horizon: Horizon::Multi,
        modes: vec![RatingMode::CcDlr],
        ..RunConfig::new(fixture("three_bus_transient.json"), dir.path().join(sub))
    };
    run(&mk("a")).unwrap();
    run(&mk("b")).unwrap();
    for f in ARTIFACTS {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn compare_reports_deltas_against_the_first_run() {
    let dir = tempfile::tempdir().unwrap();
    let one = |sub: &str, m: RatingMode| {
        let cfg = RunConfig { modes: vec![m], ..RunConfig::new(fixture("three_bus_congested.json"), dir.path().join(sub)) };
        run(&cfg).unwrap();
        dir.path().join(sub)
    };
    let slr = one("slr", RatingMode::Slr);
    let slr2 = one("slr2", RatingMode::Slr);
    let dlr = one("dlr", RatingMode::Dlr);
    let cc = one("cc", RatingMode::CcDlr);

    let same = compare(&[slr.clone(), slr2]).unwrap();
    assert_eq!(same[1].cost_delta_pct, 0.0);
    assert_eq!(same[1].emissions_delta_pct, 0.0);

    let rows = compare(&[slr.clone(), dlr, cc]).unwrap();
    assert!(rows[1].cost_delta_pct < 0.0);
    assert!(rows[2].cost_delta_pct < 0.0 && rows[2].cost_delta_pct > rows[1].cost_delta_pct);

    let o = dlrm(&["compare", slr.to_str().unwrap(), dir.path().join("dlr").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}

#[test]
fn compare_rejects_different_cases() {
    let dir = tempfile::tempdir().unwrap();
    let a = RunConfig { modes: vec![RatingMode::Slr], ..RunConfig::new(fixture("three_bus_congested.json"), dir.path().join("a")) };
    let b = RunConfig { modes: vec![RatingMode::Slr], ..RunConfig::new(fixture("two_node.json"), dir.path().join("b")) };
    run(&a).unwrap();
    run(&b).unwrap();
    let o = dlrm(&["compare", a.out.to_str().unwrap(), b.out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "CaseMismatch");
}

#[test]
fn weather_csv_replaces_case_weather() {
    let dir = tempfile::tempdir().unwrap();
    // Calmer, hotter weather at the line site lowers the dynamic rating.
    let csv = dir.path().join("w.csv");
    fs::write(
        &csv,
        "site,timestamp,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\n\
         line,t0,0.6,60,38,900,1.1\n\
         farm,t0,8,60,30,800,1.1\n",
    )
    .unwrap();
    let base = RunConfig { modes: vec![RatingMode::Dlr], ..RunConfig::new(fixture("three_bus_congested.json"), dir.path().join("a")) };
    let hot = RunConfig { weather: Some(csv), out: dir.path().join("b"), ..base.clone() };
    let c0 = run(&base).unwrap().runs[0].cost;
    let c1 = run(&hot).unwrap().runs[0].cost;
    assert!(c1 > c0, "{c1} vs {c0}");
}
