//! Deterministic synthetic fixtures shipped with the repository. The
//! `gen_fixtures` example writes them; a test checks the committed copies are
//! current.

use std::path::Path;

use crate::characterize::{
    calibration_sequence, default_qwp_angles, synthesize_intensities, synthesize_profile_trace,
    write_intensity_csv, VisibilityCurve,
};
use crate::distill::{reconstruct_tallies, OperatingPoint, SecurityParams};
use crate::error::Result;
use crate::labels::PerState;
use crate::source::default_profile_from_paper;

/// Reference operating points: (fiber km, sifted bit/s, Q_Z, φ_Z).
pub const TABLE_ROWS: [(f64, f64, f64, f64); 2] = [
    (101.0, 2320.2e3, 0.0193, 0.0367),
    (151.5, 330.0e3, 0.0188, 0.0350),
];

/// Operating point for a reference row, with the reference source's angles
/// and protocol settings.
pub fn operating_point(sifted_rate_bps: f64, qber_z: f64, phase_error: f64) -> OperatingPoint {
    let mut profile = default_profile_from_paper();
    profile.delta_deg = PerState::default();
    OperatingPoint {
        sifted_rate_bps,
        qber_z,
        phase_error,
        block_bits: crate::protocol::PA_BLOCK_BITS as f64,
        repetition_rate_hz: 5e9,
        p_bob_z: 0.5,
        profile,
        security: SecurityParams::default(),
    }
}

/// Interferometer scan whose largest pulsed/CW visibility ratio is 0.0019,
/// reached at zero delay.
pub fn visibility_curve() -> VisibilityCurve {
    let delays_mm: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.5).collect();
    // CW visibility drops off with mismatch; 0.5 at zero delay keeps the
    // ratio an exact binary halving.
    let v_cw: Vec<f64> = delays_mm
        .iter()
        .map(|d| (0.5 * (-d * d / 8.0).exp() * 1e6).round() / 1e6)
        .collect();
    let v_pulsed: Vec<f64> = delays_mm
        .iter()
        .zip(&v_cw)
        .map(|(d, cw)| {
            if *d == 0.0 {
                0.00095
            } else {
                (cw * 0.0012 * 1e8).round() / 1e8
            }
        })
        .collect();
    VisibilityCurve {
        delays_mm,
        v_cw,
        v_pulsed,
    }
}

/// `(file name, contents)` for every fixture.
pub fn render_all() -> Result<Vec<(String, Vec<u8>)>> {
    let profile = default_profile_from_paper();
    let seq = calibration_sequence();
    let mut out = Vec::new();

    let mut buf = Vec::new();
    synthesize_profile_trace(&profile, &seq, default_qwp_angles()).write_csv(&mut buf)?;
    out.push(("qwp-trace.csv".to_string(), buf));

    let mut buf = Vec::new();
    write_intensity_csv(&synthesize_intensities(&profile, &seq), &mut buf)?;
    out.push(("intensity-samples.csv".to_string(), buf));

    let mut buf = Vec::new();
    visibility_curve().write_csv(&mut buf)?;
    out.push(("visibility.csv".to_string(), buf));

    for (km, sifted, q, phi) in TABLE_ROWS {
        let t = reconstruct_tallies(&operating_point(sifted, q, phi))?;
        let mut s = t.to_json_string()?;
        s.push('\n');
        out.push((format!("table1-{km}km-tallies.json"), s.into_bytes()));
    }
    Ok(out)
}

pub fn write_all(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in render_all()? {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
