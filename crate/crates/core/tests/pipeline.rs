use std::path::{Path, PathBuf};

use qkdlink::channel::LinkModel;
use qkdlink::config::Config;
use qkdlink::distill::{
    distill, phase_error_loss_tolerant, phase_error_uncompensated, SecurityParams,
};
use qkdlink::protocol::{run_analytic, run_blocks, run_monte_carlo};
use qkdlink::source::default_profile_from_paper;
use qkdlink::tally::TallySet;
use qkdlink::Basis;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn reference_configs_load_and_resolve() {
    for name in [
        "paper-151km.toml",
        "paper-101km.toml",
        "ideal-lossless.toml",
    ] {
        let cfg = Config::load(&config(name)).unwrap();
        let r = cfg.resolve().unwrap();
        r.profile.validate().unwrap();
        r.link.validate().unwrap();
        let again = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg, "{name}");
    }
}

#[test]
fn reference_config_matches_builtin_profile() {
    let r = Config::load(&config("paper-151km.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    assert_eq!(r.profile, default_profile_from_paper());
    assert_eq!(r.link, LinkModel::reference(151.5));
}

#[test]
fn monte_carlo_tallies_distill_and_round_trip() {
    let r = Config::load(&config("paper-101km.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let t = run_monte_carlo(&r.profile, &r.link, 3_000_000, 9).unwrap();
    t.validate().unwrap();
    let back = TallySet::from_json_str(&t.to_json_string().unwrap()).unwrap();
    assert_eq!(back.cells, t.cells);
    let mut csv = Vec::new();
    t.write_csv(&mut csv).unwrap();
    let from_csv = TallySet::read_csv(csv.as_slice()).unwrap();
    assert_eq!(from_csv.cells, t.cells);
    let report = distill(&t, &r.profile, &r.link, &r.security, r.p_c_star).unwrap();
    // A few thousand sifted bits cannot beat the finite-size penalty.
    assert_eq!(report.l, 0.0);
    assert!(report.n_z > 0.0);
}

#[test]
fn ideal_lossless_has_no_errors_and_tight_phase_error() {
    let r = Config::load(&config("ideal-lossless.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let t = run_monte_carlo(&r.profile, &r.link, 2_000_000, 4).unwrap();
    assert_eq!(t.qber(Basis::Z, Basis::Z, None).unwrap(), 0.0);
    let sec = SecurityParams::default();
    let naive = phase_error_uncompensated(&t, &r.profile, &sec).unwrap();
    let lt = phase_error_loss_tolerant(&t, &r.profile, &sec).unwrap();
    // Ideal angles make both estimators coincide.
    assert!((naive - lt).abs() < 1e-12, "{naive} vs {lt}");
}

#[test]
fn analytic_tallies_are_linear_in_pulse_count() {
    let r = Config::load(&config("paper-151km.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let a = run_analytic(&r.profile, &r.link, 1_000_000).unwrap();
    let b = run_analytic(&r.profile, &r.link, 4_000_000).unwrap();
    for ((_, _, _, x), (_, _, _, y)) in a.cells.iter().zip(b.cells.iter()) {
        assert!((4.0 * x.n - y.n).abs() <= 1e-9 * y.n.max(1.0));
        assert!((4.0 * x.m - y.m).abs() <= 1e-9 * y.m.max(1.0));
    }
}

#[test]
fn block_splitting_covers_the_stream() {
    let r = Config::load(&config("ideal-lossless.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let blocks = run_blocks(&r.profile, &r.link, 10_000, 5, 10_000_000, 1).unwrap();
    assert_eq!(blocks.len(), 5);
    for b in &blocks {
        assert_eq!(b.n_z(), 10_000.0);
    }
}
