use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn fixture(name: &str) -> PathBuf {
    root().join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdlink"))
        .args(args)
        .output()
        .expect("spawn qkdlink")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Reference config with the optimizer box made coarse enough for a debug binary.
fn coarse_optimizer_config(dir: &Path, extra: &str) -> PathBuf {
    let text = std::fs::read_to_string(config("paper-151km.toml")).unwrap();
    let head = text.split("[optimizer]").next().unwrap();
    let path = dir.join("coarse.toml");
    std::fs::write(
        &path,
        format!(
            "{head}[optimizer]\nmu_signal = [0.2, 0.5]\nmu_decoy = [0.05, 0.25]\np_signal = [0.5, 0.8]\np_z = [0.8, 0.95]\nmu_step = 0.05\np_step = 0.1\nrefine_sweeps = 1\ngolden_iterations = 12\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn simulate_reference_config_reports_key_rate() {
    let v = json(&run(&[
        "simulate",
        p(&config("paper-151km.toml")),
        "--pulses",
        "200000",
        "--seed",
        "3",
    ]));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["config"]["link"]["fiber_length_km"], 151.5);
    assert!(v["report"]["skr_bps"].is_number());
    assert_eq!(v["tallies"]["elapsed_pulses"].as_f64().unwrap(), 200000.0);
}

#[test]
fn simulate_is_deterministic_in_seed_and_threads() {
    let cfg = config("paper-101km.toml");
    let a = run(&[
        "simulate",
        p(&cfg),
        "--pulses",
        "300000",
        "--seed",
        "11",
        "--threads",
        "1",
    ]);
    let b = run(&[
        "simulate",
        p(&cfg),
        "--pulses",
        "300000",
        "--seed",
        "11",
        "--threads",
        "3",
    ]);
    assert_eq!(json(&a)["tallies"], json(&b)["tallies"]);
    let c = run(&["simulate", p(&cfg), "--pulses", "300000", "--seed", "12"]);
    assert_ne!(json(&a)["tallies"], json(&c)["tallies"]);
}

#[test]
fn analytic_and_monte_carlo_agree_on_sifted_counts() {
    let cfg = config("ideal-lossless.toml");
    let n = "2000000";
    let mc = json(&run(&["simulate", p(&cfg), "--pulses", n, "--mode", "mc"]));
    let an = json(&run(&[
        "simulate",
        p(&cfg),
        "--pulses",
        n,
        "--mode",
        "analytic",
    ]));
    let (x, e) = (
        mc["report"]["n_z"].as_f64().unwrap(),
        an["report"]["n_z"].as_f64().unwrap(),
    );
    assert!((x - e).abs() <= 4.0 * e.sqrt(), "mc {x} analytic {e}");
}

#[test]
fn tallies_written_by_simulate_distill_to_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("paper-151km.toml");
    for ext in ["json", "csv"] {
        let tallies = dir.path().join(format!("t.{ext}"));
        let sim = json(&run(&[
            "simulate",
            p(&cfg),
            "--mode",
            "analytic",
            "--pulses",
            "10000000000",
            "--tallies",
            p(&tallies),
        ]));
        let dist = json(&run(&["distill", p(&tallies), p(&cfg)]));
        let (a, b) = (
            sim["report"]["l"].as_f64().unwrap(),
            dist["report"]["l"].as_f64().unwrap(),
        );
        assert!((a - b).abs() <= 1.0, "{ext}: {a} vs {b}");
    }
}

#[test]
fn malformed_config_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "schema_version = 1\n\n[link]\nfiber_length_km = \"far\"\n",
    )
    .unwrap();
    let out = run(&["simulate", p(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "schema_version = 1\n[link]\nfibre_length = 3.0\n").unwrap();
    assert_eq!(run(&["simulate", p(&path)]).status.code(), Some(2));
}

#[test]
fn missing_arguments_exit_2() {
    assert_eq!(run(&["distill"]).status.code(), Some(2));
    assert_eq!(run(&["characterize"]).status.code(), Some(2));
}

#[test]
fn distill_reference_tallies_within_reference_band() {
    let v = json(&run(&[
        "distill",
        p(&fixture("table1-151.5km-tallies.json")),
        p(&config("paper-151km.toml")),
    ]));
    let skr = v["report"]["skr_bps"].as_f64().unwrap();
    assert!((38e3..=71e3).contains(&skr), "{skr}");
    let v = json(&run(&[
        "distill",
        p(&fixture("table1-101km-tallies.json")),
        p(&config("paper-101km.toml")),
    ]));
    let skr = v["report"]["skr_bps"].as_f64().unwrap();
    assert!((275e3..=510e3).contains(&skr), "{skr}");
}

#[test]
fn distill_appends_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("summary.csv");
    for _ in 0..2 {
        json(&run(&[
            "distill",
            p(&fixture("table1-151.5km-tallies.json")),
            p(&config("paper-151km.toml")),
            "--summary-csv",
            p(&csv),
        ]));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
}

fn edited_fixture(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let src = std::fs::read_to_string(fixture("table1-151.5km-tallies.json")).unwrap();
    let mut v: Value = serde_json::from_str(&src).unwrap();
    edit(&mut v);
    let path = dir.join("t.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn distill_of_empty_run_gives_zero_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_fixture(dir.path(), |v| {
        for cell in v["cells"].as_array_mut().unwrap() {
            cell["n"] = Value::from(0.0);
            cell["m"] = Value::from(0.0);
        }
    });
    let v = json(&run(&["distill", p(&path), p(&config("paper-151km.toml"))]));
    assert_eq!(v["report"]["skr_bps"].as_f64().unwrap(), 0.0);
    assert_eq!(v["report"]["insufficient_statistics"], true);
}

#[test]
fn inconsistent_tallies_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_fixture(dir.path(), |v| {
        let cell = &mut v["cells"][0];
        cell["m"] = Value::from(cell["n"].as_f64().unwrap() * 2.0);
    });
    let out = run(&["distill", p(&path), p(&config("paper-151km.toml"))]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn characterize_qwp_fixture_recovers_reference_table() {
    let v = json(&run(&[
        "characterize",
        "--qwp",
        p(&fixture("qwp-trace.csv")),
    ]));
    let r = &v["result"];
    let close = |x: &Value, e: f64| (x.as_f64().unwrap() - e).abs() < 0.1;
    assert!(close(&r["theta_deg"]["zero"], 8.0));
    assert!(close(&r["theta_deg"]["one"], 165.6));
    assert!(close(&r["theta_deg"]["plus"], 90.0));
    assert!(close(&r["max_abs_delta_deg"]["zero"], 6.3));
    assert!(close(&r["max_abs_delta_deg"]["one"], 6.9));
    assert!(close(&r["max_abs_delta_deg"]["plus"], 8.0));
}

#[test]
fn characterize_visibility_fixture_gives_pc() {
    let v = json(&run(&[
        "characterize",
        "--visibility",
        p(&fixture("visibility.csv")),
    ]));
    assert!((v["result"]["p_c_star"].as_f64().unwrap() - 0.0019).abs() < 1e-12);
}

#[test]
fn characterize_intensity_fixture_gives_three_percent() {
    let v = json(&run(&[
        "characterize",
        "--intensity",
        p(&fixture("intensity-samples.csv")),
    ]));
    assert!((v["result"]["max_relative_deviation"].as_f64().unwrap() - 0.03).abs() < 1e-9);
}

#[test]
fn empty_or_malformed_csv_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    for flag in ["--qwp", "--intensity", "--visibility"] {
        assert_eq!(
            run(&["characterize", flag, p(&empty)]).status.code(),
            Some(2),
            "{flag}"
        );
    }
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "delay_mm,v_cw,v_pulsed\n0,0.5,zero\n").unwrap();
    let out = run(&["characterize", "--visibility", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));
}

#[test]
fn optimize_dominates_reference_point_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_optimizer_config(dir.path(), "");
    let trace = dir.path().join("trace.csv");
    let v = json(&run(&["optimize", p(&cfg), "--trace", p(&trace)]));
    let best = v["result"]["best_skr_bps"].as_f64().unwrap();
    let reference = v["reference_point_skr_bps"].as_f64().unwrap();
    assert!(best >= reference, "{best} < {reference}");
    assert_eq!(v["result"]["positive_key"], true);
    let rows = std::fs::read_to_string(&trace).unwrap().lines().count() - 1;
    assert_eq!(rows, v["result"]["trace"].as_array().unwrap().len());
}

#[test]
fn optimize_grid_only_evaluates_each_grid_point_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_optimizer_config(dir.path(), "");
    let v = json(&run(&["optimize", p(&cfg), "--grid-only"]));
    let n = v["result"]["grid_size"].as_u64().unwrap() as usize;
    assert_eq!(v["result"]["trace"].as_array().unwrap().len(), n);
}

#[test]
fn optimize_infeasible_box_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("paper-151km.toml")).unwrap();
    let head = text.split("[optimizer]").next().unwrap();
    let path = dir.path().join("empty.toml");
    std::fs::write(
        &path,
        format!("{head}[optimizer]\nmu_signal = [0.1, 0.2]\nmu_decoy = [0.3, 0.4]\n"),
    )
    .unwrap();
    assert_eq!(run(&["optimize", p(&path)]).status.code(), Some(2));
}
