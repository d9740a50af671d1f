//! Finite-key distillation: Hoeffding-corrected counts, 1-decoy bounds,
//! loss-tolerant phase-error estimation, error-correction leakage and the
//! final secret-key length with the phase-coherence discount.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bloch::{binary_entropy, state_from_theta, AmplitudeReference};
use crate::channel::LinkModel;
use crate::error::{QkdError, Result};
use crate::labels::{Basis, Detector, Intensity, PerIntensity, PerState, StateLabel};
use crate::source::SourceProfile;
use crate::tally::{TallyKind, TallySet};

/// Number of Hoeffding invocations the ε_sec budget is shared between.
pub const EPS_SPLIT: f64 = 19.0;

/// QBER up to which the fixed rate-2/3 LDPC code is used.
pub const FIXED_RATE_QBER_LIMIT: f64 = 0.03;

/// Leakage inefficiency of the fallback model above the fixed-rate limit.
pub const FALLBACK_EC_EFFICIENCY: f64 = 1.16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecurityParams {
    pub eps_sec: f64,
    pub eps_corr: f64,
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            eps_sec: 1e-9,
            eps_corr: 1e-15,
        }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_sec", self.eps_sec), ("eps_corr", self.eps_corr)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(QkdError::InvalidParameter(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Failure probability assigned to each individual concentration bound.
    pub fn eps_per_bound(&self) -> f64 {
        self.eps_sec / EPS_SPLIT
    }
}

/// Hoeffding half-width sqrt(n/2 · ln(1/ε)).
pub fn hoeffding_delta(n: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(QkdError::InvalidParameter(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if !(n >= 0.0) {
        return Err(QkdError::InvalidParameter(format!(
            "count must be non-negative, got {n}"
        )));
    }
    Ok((n / 2.0 * (1.0 / eps).ln()).sqrt())
}

/// `(n − δ, n + δ)` with the lower end clamped at zero.
pub fn hoeffding_bounds(n: f64, eps: f64) -> Result<(f64, f64)> {
    let d = hoeffding_delta(n, eps)?;
    Ok(((n - d).max(0.0), n + d))
}

/// τ_n: probability that a pulse carries n photons, averaged over intensities.
pub fn photon_number_weight(profile: &SourceProfile, n: u32) -> f64 {
    let fact: f64 = (1..=n).map(f64::from).product();
    Intensity::ALL
        .iter()
        .map(|&a| {
            let mu = profile.mu[a];
            profile.p_intensity[a] * (-mu).exp() * mu.powi(n as i32) / fact
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyBounds {
    pub s0_z: f64,
    pub s0_z_upper: f64,
    pub s1_z: f64,
    pub v1_x_upper: f64,
    pub tau0: f64,
    pub tau1: f64,
    /// Hoeffding-corrected, intensity-rescaled Z counts (e^μ/p · n±).
    pub n_z_minus: PerIntensity<f64>,
    pub n_z_plus: PerIntensity<f64>,
    pub insufficient_statistics: bool,
}

fn check_intensities(profile: &SourceProfile) -> Result<(f64, f64, f64, f64)> {
    let (mu0, mu1) = (profile.mu.signal, profile.mu.decoy);
    if !(mu0 > mu1 && mu1 > 0.0) {
        return Err(QkdError::InvalidParameter(format!(
            "need signal > decoy > 0, got {mu0} and {mu1}"
        )));
    }
    let (p0, p1) = (profile.p_intensity.signal, profile.p_intensity.decoy);
    if !(p0 > 0.0 && p1 > 0.0) {
        return Err(QkdError::InvalidParameter(
            "both intensities need non-zero probability".into(),
        ));
    }
    Ok((mu0, mu1, p0, p1))
}

/// 1-decoy lower bounds on vacuum and single-photon Z events and an upper
/// bound on single-photon X errors.
pub fn decoy_bounds(
    t: &TallySet,
    profile: &SourceProfile,
    sec: &SecurityParams,
) -> Result<DecoyBounds> {
    sec.validate()?;
    let (mu0, mu1, p0, p1) = check_intensities(profile)?;
    let eps = sec.eps_per_bound();
    let tau0 = photon_number_weight(profile, 0);
    let tau1 = photon_number_weight(profile, 1);

    let n_z = t.n_z();
    let m_z = t.aggregate(Basis::Z, Basis::Z, None).m;
    let dn = hoeffding_delta(n_z, eps)?;
    let dm = hoeffding_delta(m_z, eps)?;
    let scale = PerIntensity::new(mu0.exp() / p0, mu1.exp() / p1);

    let n_k = PerIntensity::from_fn(|a| t.n(Basis::Z, Basis::Z, a));
    let n_minus = PerIntensity::from_fn(|a| scale[a] * (n_k[a] - dn).max(0.0));
    let n_plus = PerIntensity::from_fn(|a| scale[a] * (n_k[a] + dn));

    let s0_lower = tau0 * (mu0 * n_minus.decoy - mu1 * n_plus.signal) / (mu0 - mu1);
    let s0_z = s0_lower.clamp(0.0, n_z);
    let m_decoy_plus = t.m(Basis::Z, Basis::Z, Intensity::Decoy) + dm;
    let s0_z_upper = if n_z > 0.0 {
        2.0 * (tau0 * scale.decoy * m_decoy_plus + dn)
    } else {
        0.0
    };

    let s1_raw = tau1 * mu0 / (mu1 * (mu0 - mu1))
        * (n_minus.decoy
            - (mu1 / mu0).powi(2) * n_plus.signal
            - (mu0 * mu0 - mu1 * mu1) / (mu0 * mu0) * s0_z_upper / tau0);
    let s1_z = s1_raw.clamp(0.0, (n_z - s0_z).max(0.0));

    let m_x = t.aggregate(Basis::X, Basis::X, None).m;
    let dmx = hoeffding_delta(m_x, eps)?;
    let mx_plus = scale.signal * (t.m(Basis::X, Basis::X, Intensity::Signal) + dmx);
    let mx_minus = scale.decoy * (t.m(Basis::X, Basis::X, Intensity::Decoy) - dmx).max(0.0);
    let v1_x_upper = (tau1 * (mx_plus - mx_minus) / (mu0 - mu1)).max(0.0);

    Ok(DecoyBounds {
        s0_z,
        s0_z_upper,
        s1_z,
        v1_x_upper,
        tau0,
        tau1,
        n_z_minus: n_minus,
        n_z_plus: n_plus,
        insufficient_statistics: s1_z <= 0.0,
    })
}

/// Finite-sample deviation between the phase error of the sifted key and of
/// the sample it was estimated on (random sampling without replacement).
pub fn phase_error_deviation(eps: f64, phi: f64, s_z: f64, s_x: f64) -> f64 {
    if s_z <= 0.0 || s_x <= 0.0 {
        return 0.5;
    }
    let phi = phi.clamp(1e-6, 0.5);
    let var = (s_z + s_x) * (1.0 - phi) * phi / (s_z * s_x * std::f64::consts::LN_2);
    let arg = (s_z + s_x) / (s_z * s_x * (1.0 - phi) * phi * eps * eps);
    let lg = arg.log2();
    if lg <= 0.0 {
        0.0
    } else {
        (var * lg).sqrt()
    }
}

/// Audit trail of the loss-tolerant phase-error estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseErrorEstimate {
    /// Final bound including the finite-sample deviation, capped at 0.5.
    pub phi_z: f64,
    /// Single-photon virtual error rate before the sampling deviation.
    pub rate_upper: f64,
    pub gamma: f64,
    pub numerator_upper: f64,
    pub denominator_lower: f64,
    pub s_x: f64,
    /// Virtual-state decomposition weights on (ψ0, ψ1, ψ+), for the + and −
    /// virtual states.
    pub weights_plus: [f64; 3],
    pub weights_minus: [f64; 3],
}

/// Counts and sent pulses per (state, intensity) for one detector outcome set.
struct Gains<'a> {
    t: &'a TallySet,
    eps: f64,
}

impl Gains<'_> {
    fn count(&self, j: StateLabel, a: Intensity, ds: &[Detector]) -> f64 {
        ds.iter()
            .map(|&d| self.t.cells.detector_count(j, a, d))
            .sum()
    }

    /// Hoeffding half-width for a count family, sized on its total over intensities.
    fn delta(&self, j: StateLabel, ds: &[Detector]) -> Result<f64> {
        let total: f64 = Intensity::ALL.iter().map(|&a| self.count(j, a, ds)).sum();
        hoeffding_delta(total, self.eps)
    }

    fn sent(&self, j: StateLabel, a: Intensity) -> Result<f64> {
        let s = self.t.sent[j][a];
        if s > 0.0 {
            Ok(s)
        } else {
            Err(QkdError::InvalidParameter(format!(
                "no {a} pulses of state {j} were sent"
            )))
        }
    }

    /// Gain bound `(count ± δ)/sent`; `upper` selects the side.
    fn gain(&self, j: StateLabel, a: Intensity, ds: &[Detector], upper: bool) -> Result<f64> {
        let c = self.count(j, a, ds);
        let d = self.delta(j, ds)?;
        let c = if upper { c + d } else { (c - d).max(0.0) };
        Ok(c / self.sent(j, a)?)
    }
}

/// Solves Σ_j w_j·(1, sin θ_j, cos θ_j) = target.
fn decompose(theta_deg: &PerState<f64>, target: [f64; 3]) -> Result<[f64; 3]> {
    let col = |j: StateLabel| {
        let th = theta_deg[j].to_radians();
        [1.0, th.sin(), th.cos()]
    };
    let (c0, c1, cp) = (
        col(StateLabel::Zero),
        col(StateLabel::One),
        col(StateLabel::Plus),
    );
    let m = Matrix3::new(
        c0[0], c1[0], cp[0], c0[1], c1[1], cp[1], c0[2], c1[2], cp[2],
    );
    if m.determinant().abs() < 1e-9 {
        return Err(QkdError::SingularStates);
    }
    let w = m
        .lu()
        .solve(&Vector3::new(target[0], target[1], target[2]))
        .ok_or(QkdError::SingularStates)?;
    Ok([w[0], w[1], w[2]])
}

/// Virtual states (ψ0 ± ψ1)/2 written as (trace, x, z) coefficients of
/// ½(a·I + x·σx + z·σz).
fn virtual_targets(theta_deg: &PerState<f64>) -> ([f64; 3], [f64; 3]) {
    let a0 = state_from_theta(theta_deg.zero).amplitudes(AmplitudeReference::Zero);
    let a1 = state_from_theta(theta_deg.one).amplitudes(AmplitudeReference::One);
    let coeffs = |sign: f64| {
        let v = [(a0[0] + sign * a1[0]) / 2.0, (a0[1] + sign * a1[1]) / 2.0];
        [
            v[0] * v[0] + v[1] * v[1],
            2.0 * v[0] * v[1],
            v[0] * v[0] - v[1] * v[1],
        ]
    };
    (coeffs(1.0), coeffs(-1.0))
}

const STATE_ORDER: [StateLabel; 3] = [StateLabel::Zero, StateLabel::One, StateLabel::Plus];

/// Loss-tolerant phase-error bound using the profile's prepared angles.
///
/// The three prepared states fix every virtual-state yield through a linear
/// decomposition in the (I, σx, σz) basis. Decoy analysis is applied to the
/// combined virtual gains; the vacuum contribution is state independent and
/// bounded from the pooled gains.
pub fn phase_error_estimate(
    t: &TallySet,
    profile: &SourceProfile,
    sec: &SecurityParams,
    s1_z: f64,
) -> Result<PhaseErrorEstimate> {
    estimate_with_angles(t, profile, &profile.theta_deg, sec, s1_z)
}

fn estimate_with_angles(
    t: &TallySet,
    profile: &SourceProfile,
    theta_deg: &PerState<f64>,
    sec: &SecurityParams,
    s1_z: f64,
) -> Result<PhaseErrorEstimate> {
    sec.validate()?;
    let (mu0, mu1, _, _) = check_intensities(profile)?;
    let mu = PerIntensity::new(mu0, mu1);
    let eps = sec.eps_per_bound();
    let g = Gains { t, eps };

    let (tp, tm) = virtual_targets(theta_deg);
    let wp = decompose(theta_deg, tp)?;
    let wm = decompose(theta_deg, tm)?;

    // Vacuum yield per X outcome, lower bound from gains pooled over states.
    let vacuum_lower = |d: Detector| -> Result<f64> {
        let mut a = PerIntensity::new((0.0, 0.0), (0.0, 0.0));
        let total: f64 = STATE_ORDER
            .iter()
            .flat_map(|&j| Intensity::ALL.map(move |k| (j, k)))
            .map(|(j, k)| g.count(j, k, &[d]))
            .sum();
        let dlt = hoeffding_delta(total, eps)?;
        for k in Intensity::ALL {
            let c: f64 = STATE_ORDER.iter().map(|&j| g.count(j, k, &[d])).sum();
            let s: f64 = STATE_ORDER.iter().map(|&j| t.sent[j][k]).sum();
            if s <= 0.0 {
                return Err(QkdError::InvalidParameter(format!(
                    "no {k} pulses were sent"
                )));
            }
            a[k] = (
                mu[k].exp() * (c - dlt).max(0.0) / s,
                mu[k].exp() * (c + dlt) / s,
            );
        }
        Ok(((mu0 * a.decoy.0 - mu1 * a.signal.1) / (mu0 - mu1)).max(0.0))
    };

    // Upper bound on the single-photon yield of a virtual state into `d`.
    let virtual_yield_upper = |w: &[f64; 3], trace: f64, d: Detector| -> Result<f64> {
        let y0 = vacuum_lower(d)?;
        let mut best = f64::INFINITY;
        for k in Intensity::ALL {
            let mut gain = 0.0;
            for (i, &j) in STATE_ORDER.iter().enumerate() {
                gain += w[i] * g.gain(j, k, &[d], w[i] > 0.0)?;
            }
            let a = mu[k].exp() * gain;
            best = best.min((a - trace * y0) / mu[k]);
        }
        Ok(best.max(0.0))
    };

    let numerator = virtual_yield_upper(&wp, tp[0], Detector::XMinus)?
        + virtual_yield_upper(&wm, tm[0], Detector::XPlus)?;

    // Denominator: single-photon X yield of the Z-basis states, ½(Y_0 + Y_1).
    let xs = [Detector::XPlus, Detector::XMinus];
    let z_states = [StateLabel::Zero, StateLabel::One];
    let mut a_lo = PerIntensity::new(0.0, 0.0);
    let mut a_hi = PerIntensity::new(0.0, 0.0);
    let mut y0_upper = f64::INFINITY;
    for k in Intensity::ALL {
        for &j in &z_states {
            a_lo[k] += 0.5 * mu[k].exp() * g.gain(j, k, &xs, false)?;
            a_hi[k] += 0.5 * mu[k].exp() * g.gain(j, k, &xs, true)?;
        }
        // Half of the vacuum clicks of |+⟩ land in X−.
        y0_upper = y0_upper
            .min(2.0 * mu[k].exp() * g.gain(StateLabel::Plus, k, &[Detector::XMinus], true)?);
    }
    let denominator = (mu0 / (mu1 * (mu0 - mu1))
        * (a_lo.decoy
            - (mu1 / mu0).powi(2) * a_hi.signal
            - (mu0 * mu0 - mu1 * mu1) / (mu0 * mu0) * y0_upper))
        .max(0.0);

    let rate_upper = if denominator > 0.0 {
        (numerator / denominator).min(0.5)
    } else {
        0.5
    };
    let single_photon_pulses: f64 = z_states
        .iter()
        .flat_map(|&j| Intensity::ALL.map(move |k| (j, k)))
        .map(|(j, k)| t.sent[j][k] * (-mu[k]).exp() * mu[k])
        .sum();
    let s_x = denominator * single_photon_pulses;
    let gamma = phase_error_deviation(eps, rate_upper, s1_z, s_x);
    Ok(PhaseErrorEstimate {
        phi_z: (rate_upper + gamma).min(0.5),
        rate_upper,
        gamma,
        numerator_upper: numerator,
        denominator_lower: denominator,
        s_x,
        weights_plus: wp,
        weights_minus: wm,
    })
}

/// Phase-error bound φ_Z compensating the measured state-preparation flaws.
pub fn phase_error_loss_tolerant(
    t: &TallySet,
    profile: &SourceProfile,
    sec: &SecurityParams,
) -> Result<f64> {
    let s1 = decoy_bounds(t, profile, sec)?.s1_z;
    Ok(phase_error_estimate(t, profile, sec, s1)?.phi_z)
}

/// The same estimator assuming flawless states (0°, 180°, 90°), i.e. what an
/// analysis that ignores the preparation flaws would report.
pub fn phase_error_uncompensated(
    t: &TallySet,
    profile: &SourceProfile,
    sec: &SecurityParams,
) -> Result<f64> {
    let s1 = decoy_bounds(t, profile, sec)?.s1_z;
    let ideal = PerState::from_fn(StateLabel::ideal_theta_deg);
    Ok(estimate_with_angles(t, profile, &ideal, sec, s1)?.phi_z)
}

/// Bits revealed during error correction.
pub fn ec_leakage(n_z: f64, qber_z: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&qber_z) {
        return Err(QkdError::InvalidParameter(format!(
            "QBER must lie in [0, 0.5], got {qber_z}"
        )));
    }
    if qber_z <= FIXED_RATE_QBER_LIMIT {
        Ok(n_z / 3.0)
    } else {
        Ok(FALLBACK_EC_EFFICIENCY * n_z * binary_entropy(qber_z)?)
    }
}

/// Constant finite-key cost 6·log2(19/ε_sec) + log2(2/ε_corr).
pub fn finite_key_penalty(sec: &SecurityParams) -> f64 {
    6.0 * (EPS_SPLIT / sec.eps_sec).log2() + (2.0 / sec.eps_corr).log2()
}

/// Key length before flooring and clamping, including the (1 − p_c*) factor.
pub fn key_length_raw(
    s1_z: f64,
    phi_z: f64,
    lambda_ec: f64,
    sec: &SecurityParams,
    p_c_star: f64,
) -> Result<f64> {
    sec.validate()?;
    if !(0.0..=0.5).contains(&phi_z) {
        return Err(QkdError::InvalidParameter(format!(
            "phase error must lie in [0, 0.5], got {phi_z}"
        )));
    }
    if !(0.0..=1.0).contains(&p_c_star) {
        return Err(QkdError::InvalidParameter(format!(
            "p_c* must lie in [0, 1], got {p_c_star}"
        )));
    }
    if s1_z < 0.0 || lambda_ec < 0.0 {
        return Err(QkdError::InvalidParameter(
            "counts must be non-negative".into(),
        ));
    }
    let bits = s1_z * (1.0 - binary_entropy(phi_z)?) - lambda_ec - finite_key_penalty(sec);
    Ok(bits * (1.0 - p_c_star))
}

/// Extractable secret bits. The vacuum bound is accepted for interface
/// symmetry but does not enter the length.
pub fn key_length(
    _s0_z: f64,
    s1_z: f64,
    phi_z: f64,
    lambda_ec: f64,
    sec: &SecurityParams,
    p_c_star: f64,
) -> Result<f64> {
    Ok(key_length_raw(s1_z, phi_z, lambda_ec, sec, p_c_star)?
        .floor()
        .max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyReport {
    pub n_z: f64,
    pub qber_z: f64,
    pub elapsed_pulses: f64,
    pub sifted_rate_bps: f64,
    pub s_0z: f64,
    pub s_0z_upper: f64,
    pub s_1z: f64,
    pub v_1x_upper: f64,
    pub phi_z: f64,
    pub phase_error: Option<PhaseErrorEstimate>,
    pub lambda_ec: f64,
    pub penalty_bits: f64,
    pub p_c_star: f64,
    pub l_raw: f64,
    pub l: f64,
    pub skr_bps: f64,
    pub decoy: DecoyBounds,
    pub insufficient_statistics: bool,
}

/// One row in the column order of the usual results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fiber_length_km: f64,
    pub attenuation_db: f64,
    pub sifted_rate_kbps: f64,
    pub phi_z_percent: f64,
    pub q_z_percent: f64,
    pub skr_kbps: f64,
}

impl KeyReport {
    pub fn summary(&self, model: &LinkModel) -> SummaryRow {
        SummaryRow {
            fiber_length_km: model.fiber_length_km,
            attenuation_db: model.fiber_length_km * model.attenuation_db_per_km,
            sifted_rate_kbps: self.sifted_rate_bps / 1e3,
            phi_z_percent: self.phi_z * 100.0,
            q_z_percent: self.qber_z * 100.0,
            skr_kbps: self.skr_bps / 1e3,
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Full pipeline: decoy bounds, phase error, leakage, key length and rate.
pub fn distill(
    t: &TallySet,
    profile: &SourceProfile,
    model: &LinkModel,
    sec: &SecurityParams,
    p_c_star: f64,
) -> Result<KeyReport> {
    t.validate()?;
    model.validate()?;
    let decoy = decoy_bounds(t, profile, sec)?;
    let n_z = t.n_z();
    let qber_z = if n_z > 0.0 {
        t.qber(Basis::Z, Basis::Z, None)?
    } else {
        0.0
    };

    let phase_error = if decoy.insufficient_statistics {
        None
    } else {
        Some(phase_error_estimate(t, profile, sec, decoy.s1_z)?)
    };
    let phi_z = phase_error.as_ref().map_or(0.5, |p| p.phi_z);
    let lambda_ec = ec_leakage(n_z, qber_z.min(0.5))?;
    let l_raw = key_length_raw(decoy.s1_z, phi_z, lambda_ec, sec, p_c_star)?;
    let l = key_length(decoy.s0_z, decoy.s1_z, phi_z, lambda_ec, sec, p_c_star)?;
    let elapsed_s = t.elapsed_pulses / model.repetition_rate_hz;
    let (skr_bps, sifted_rate_bps) = if elapsed_s > 0.0 {
        (l / elapsed_s, n_z / elapsed_s)
    } else {
        (0.0, 0.0)
    };
    Ok(KeyReport {
        n_z,
        qber_z,
        elapsed_pulses: t.elapsed_pulses,
        sifted_rate_bps,
        s_0z: decoy.s0_z,
        s_0z_upper: decoy.s0_z_upper,
        s_1z: decoy.s1_z,
        v_1x_upper: decoy.v1_x_upper,
        phi_z,
        phase_error,
        lambda_ec,
        penalty_bits: finite_key_penalty(sec),
        p_c_star,
        l_raw,
        l,
        skr_bps,
        insufficient_statistics: decoy.insufficient_statistics,
        decoy,
    })
}

/// Operating point in the reported format from which a consistent tally set can be
/// rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub sifted_rate_bps: f64,
    pub qber_z: f64,
    pub phase_error: f64,
    pub block_bits: f64,
    pub repetition_rate_hz: f64,
    pub p_bob_z: f64,
    pub profile: SourceProfile,
    pub security: SecurityParams,
}

/// Rebuilds expected tallies matching an operating point.
///
/// The per-pulse detection probability 1 − e^{−μη} is solved for η from the
/// sifted rate, and intensities are split by their gains. Z-basis errors follow
/// the quoted QBER; X-basis outcomes follow ½(1 − V·sin θ_j), with the
/// visibility V tuned so that the loss-tolerant estimator returns the quoted
/// phase error.
pub fn reconstruct_tallies(op: &OperatingPoint) -> Result<TallySet> {
    let p = &op.profile;
    p.validate()?;
    op.security.validate()?;
    if !(op.sifted_rate_bps > 0.0 && op.block_bits > 0.0 && op.repetition_rate_hz > 0.0) {
        return Err(QkdError::InvalidParameter(
            "rates and block size must be positive".into(),
        ));
    }
    if !(0.0..=0.5).contains(&op.qber_z) || !(0.0..=0.5).contains(&op.phase_error) {
        return Err(QkdError::InvalidParameter(
            "error rates must lie in [0, 0.5]".into(),
        ));
    }
    let per_pulse = op.sifted_rate_bps / op.repetition_rate_hz;
    let sifted_at = |eta: f64| -> f64 {
        Intensity::ALL
            .iter()
            .map(|&k| p.p_intensity[k] * (1.0 - (-p.mu[k] * eta).exp()))
            .sum::<f64>()
            * p.p_z()
            * op.p_bob_z
    };
    if sifted_at(1.0) < per_pulse {
        return Err(QkdError::InvalidParameter(format!(
            "sifted rate {} bps exceeds what a lossless link delivers",
            op.sifted_rate_bps
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sifted_at(mid) < per_pulse {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eta = 0.5 * (lo + hi);
    let elapsed = op.block_bits / per_pulse;

    let build = |visibility: f64| -> TallySet {
        let mut t = TallySet::empty(TallyKind::Expected, false);
        t.elapsed_pulses = elapsed;
        t.coherent_pulses = (elapsed - 1.0).max(0.0) * p.phase_coherence;
        for j in StateLabel::ALL {
            let sin_t = p.theta_deg[j].to_radians().sin();
            for k in Intensity::ALL {
                let sent = elapsed * p.p_state[j] * p.p_intensity[k];
                t.sent[j][k] = sent;
                let det = sent * (1.0 - (-p.mu[k] * eta).exp());
                let nz = det * op.p_bob_z;
                let nx = det * (1.0 - op.p_bob_z);
                let ez = if j == StateLabel::Plus {
                    0.5
                } else {
                    op.qber_z
                };
                *t.cells.get_mut(j, Basis::Z, k) = crate::tally::Cell { n: nz, m: nz * ez };
                let ex = 0.5 * (1.0 - visibility * sin_t);
                *t.cells.get_mut(j, Basis::X, k) = crate::tally::Cell { n: nx, m: nx * ex };
            }
        }
        t
    };
    let phi_at = |v: f64| phase_error_loss_tolerant(&build(v), p, &op.security);

    let (mut lo, mut hi) = (0.0, 1.0);
    if phi_at(hi)? > op.phase_error {
        return Err(QkdError::InvalidParameter(format!(
            "phase error {} is below what full visibility yields",
            op.phase_error
        )));
    }
    if phi_at(lo)? < op.phase_error {
        return Ok(build(lo));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if phi_at(mid)? > op.phase_error {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(build(0.5 * (lo + hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::run_analytic;
    use crate::source::default_profile_from_paper;
    use proptest::prelude::*;

    fn h(p: f64) -> f64 {
        if p <= 0.0 || p >= 1.0 {
            0.0
        } else {
            -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
        }
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_bounds(0.0, 1e-9).unwrap(), (0.0, 0.0));
        let d = hoeffding_delta(1e6, 1e-9).unwrap();
        assert!((d - 3219.0).abs() < 0.1, "{d}");
        let (lo, hi) = hoeffding_bounds(1e6, 1e-9).unwrap();
        assert_eq!((lo.round(), hi.round()), (996_781.0, 1_003_219.0));
        assert!(hoeffding_delta(1e6, 1.0 - 1e-12).unwrap() < 1.0);
        assert!(hoeffding_delta(1.0, 0.0).is_err());
        assert!(hoeffding_delta(1.0, 1.0).is_err());
        assert!(hoeffding_delta(-1.0, 0.5).is_err());
    }

    #[test]
    fn penalty_constant() {
        let sec = SecurityParams::default();
        let oracle = 6.0 * (19e9f64).ln() / 2f64.ln() + (2e15f64).ln() / 2f64.ln();
        assert!((finite_key_penalty(&sec) - oracle).abs() < 1e-9);
        assert!((finite_key_penalty(&sec) - 255.7).abs() < 0.1);
        assert!((6.0 * (19e9f64).log2() - 6.0 * 34.146).abs() < 6e-3);
    }

    #[test]
    fn leakage_examples() {
        assert_eq!(ec_leakage(8_149_248.0, 0.0188).unwrap(), 2_716_416.0);
        assert_eq!(ec_leakage(900.0, 0.0).unwrap(), 300.0);
        let v = ec_leakage(1000.0, 0.05).unwrap();
        assert!((h(0.05) - 0.28640).abs() < 5e-6);
        assert!((v - 1.16 * 1000.0 * h(0.05)).abs() < 1e-9);
        assert!(ec_leakage(10.0, 0.6).is_err());
    }

    #[test]
    fn key_length_examples() {
        let sec = SecurityParams::default();
        let base = key_length_raw(1e6, 0.03, 2e5, &sec, 0.0).unwrap();
        let disc = key_length_raw(1e6, 0.03, 2e5, &sec, 0.0019).unwrap();
        assert_eq!(disc, base * (1.0 - 0.0019));
        assert_eq!(key_length(0.0, 1000.0, 0.1, 1e6, &sec, 0.0).unwrap(), 0.0);
        let l = key_length(0.0, 1e6, 0.03, 2e5, &sec, 0.0).unwrap();
        let oracle = (1e6 * (1.0 - h(0.03)) - 2e5 - finite_key_penalty(&sec)).floor();
        assert_eq!(l, oracle);
    }

    #[test]
    fn decoy_zero_counts() {
        let t = TallySet::empty(TallyKind::Sampled, false);
        let b = decoy_bounds(
            &t,
            &default_profile_from_paper(),
            &SecurityParams::default(),
        )
        .unwrap();
        assert_eq!((b.s0_z, b.s1_z, b.v1_x_upper), (0.0, 0.0, 0.0));
        assert!(b.insufficient_statistics);
    }

    #[test]
    fn decoy_bound_close_to_truth_at_large_n() {
        let p = SourceProfile::ideal(0.3, 0.15, 0.6, 0.9);
        let m = LinkModel {
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(101.0)
        };
        // Pulse count chosen so n_Z ≈ 1e8.
        let t = run_analytic(&p, &m, 300_000_000_000).unwrap();
        assert!(t.n_z() > 0.9e8 && t.n_z() < 3e8, "{}", t.n_z());
        let b = decoy_bounds(&t, &p, &SecurityParams::default()).unwrap();
        let truth = t.single_photon.as_ref().unwrap();
        let s1_true: f64 = [StateLabel::Zero, StateLabel::One]
            .iter()
            .flat_map(|&j| Intensity::ALL.map(|a| truth.get(j, Basis::Z, a).n))
            .sum();
        assert!(b.s1_z <= s1_true);
        assert!(b.s1_z >= 0.95 * s1_true, "{} vs {}", b.s1_z, s1_true);
        assert!(b.s0_z + b.s1_z <= t.n_z());
    }

    #[test]
    fn decoy_rejects_bad_intensities() {
        let p = SourceProfile::ideal(0.15, 0.3, 0.6, 0.9);
        let t = TallySet::empty(TallyKind::Sampled, false);
        assert!(decoy_bounds(&t, &p, &SecurityParams::default()).is_err());
    }

    #[test]
    fn weights_reproduce_targets() {
        let th = default_profile_from_paper().theta_deg;
        let (tp, tm) = virtual_targets(&th);
        for (target, w) in [
            (tp, decompose(&th, tp).unwrap()),
            (tm, decompose(&th, tm).unwrap()),
        ] {
            let mut acc = [0.0; 3];
            for (i, j) in STATE_ORDER.iter().enumerate() {
                let r = th[*j].to_radians();
                acc[0] += w[i];
                acc[1] += w[i] * r.sin();
                acc[2] += w[i] * r.cos();
            }
            for c in 0..3 {
                assert!((acc[c] - target[c]).abs() < 1e-12);
            }
        }
        // The two virtual states add up to the Z-basis mixture.
        assert!((tp[0] + tm[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_states_are_singular() {
        let th = PerState::new(0.0, 180.0, 0.0);
        assert!(matches!(
            decompose(&th, [1.0, 0.0, 0.0]),
            Err(QkdError::SingularStates)
        ));
        let th = PerState::new(10.0, 10.0, 90.0);
        assert!(matches!(
            decompose(&th, [1.0, 0.0, 0.0]),
            Err(QkdError::SingularStates)
        ));
    }

    fn symmetric_tallies(theta: PerState<f64>, e_x: f64, pulses: f64) -> (TallySet, SourceProfile) {
        let mut p = SourceProfile::ideal(0.3, 0.15, 0.6, 0.9);
        p.theta_deg = theta;
        let m = LinkModel {
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(101.0)
        };
        let mut t = crate::protocol::expected_tallies(&p, &m, pulses);
        // Depolarize the X outcomes so every state sees error e_x w.r.t. its Bloch x-component.
        for j in StateLabel::ALL {
            let s = p.theta_deg[j].to_radians().sin();
            for a in Intensity::ALL {
                let c = t.cells.get_mut(j, Basis::X, a);
                c.m = c.n * (0.5 - (0.5 - e_x) * s);
            }
        }
        (t, p)
    }

    #[test]
    fn ideal_states_reduce_to_x_error() {
        let e = 0.03;
        let (t, p) = symmetric_tallies(PerState::new(0.0, 180.0, 90.0), e, 1e18);
        let sec = SecurityParams::default();
        let est =
            phase_error_estimate(&t, &p, &sec, decoy_bounds(&t, &p, &sec).unwrap().s1_z).unwrap();
        // Oracle for the asymptotic decoy slack on a linear-loss channel, in
        // units of the single-photon X yield: the numerator picks up e^{μ1};
        // the denominator is the 1-decoy single-photon bound with the vacuum
        // bound 2·e^{μ1}·μ1·e taken from the |+⟩ errors at the decoy intensity.
        let (m0, m1): (f64, f64) = (0.3, 0.15);
        let y0_upper = 2.0 * m1.exp() * m1 * e;
        let den = m0 / (m1 * (m0 - m1))
            * (m1 * m1.exp()
                - (m1 * m1 / m0) * m0.exp()
                - (m0 * m0 - m1 * m1) / (m0 * m0) * y0_upper);
        let slack = m1.exp() / den;
        assert!(est.rate_upper >= e);
        assert!(
            (est.rate_upper - e * slack).abs() < 2e-3 * e,
            "{} vs {}",
            est.rate_upper,
            e * slack
        );
        assert!(est.gamma < 1e-4);
    }

    #[test]
    fn compensation_beats_naive_estimator() {
        let p = default_profile_from_paper().without_correlations();
        let m = LinkModel {
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(151.5)
        };
        let t = run_analytic(&p, &m, 1_000_000_000_000_000_000).unwrap();
        let sec = SecurityParams::default();
        let lt = phase_error_loss_tolerant(&t, &p, &sec).unwrap();
        let naive = phase_error_uncompensated(&t, &p, &sec).unwrap();
        assert!(lt < 0.001, "{lt}");
        assert!(naive > lt);
    }

    #[test]
    fn distill_zero_detections() {
        let mut t = TallySet::empty(TallyKind::Sampled, false);
        t.elapsed_pulses = 1e6;
        let r = distill(
            &t,
            &default_profile_from_paper(),
            &LinkModel::default(),
            &SecurityParams::default(),
            0.0019,
        )
        .unwrap();
        assert_eq!((r.l, r.skr_bps), (0.0, 0.0));
        assert!(r.insufficient_statistics);
    }

    fn reference_point(sifted: f64, q: f64, phi: f64) -> OperatingPoint {
        let mut profile = default_profile_from_paper();
        profile.delta_deg = PerState::default();
        OperatingPoint {
            sifted_rate_bps: sifted,
            qber_z: q,
            phase_error: phi,
            block_bits: 8_149_248.0,
            repetition_rate_hz: 5e9,
            p_bob_z: 0.5,
            profile,
            security: SecurityParams::default(),
        }
    }

    #[test]
    fn reconstruction_hits_operating_point() {
        let op = reference_point(330e3, 0.0188, 0.035);
        let t = reconstruct_tallies(&op).unwrap();
        t.validate().unwrap();
        assert!((t.n_z() - op.block_bits).abs() < 1e-6 * op.block_bits);
        assert!((t.qber(Basis::Z, Basis::Z, None).unwrap() - 0.0188).abs() < 1e-12);
        let phi = phase_error_loss_tolerant(&t, &op.profile, &op.security).unwrap();
        assert!((phi - 0.035).abs() < 1e-6);
        let r = distill(
            &t,
            &op.profile,
            &LinkModel::reference(151.5),
            &op.security,
            0.0019,
        )
        .unwrap();
        assert!((r.sifted_rate_bps - 330e3).abs() < 1.0);
        let ratio = r.s_1z / r.n_z;
        assert!((0.6..=0.9).contains(&ratio), "{ratio}");
    }

    proptest! {
        #[test]
        fn key_length_monotone(
            s1 in 1e4f64..1e8,
            phi in 0.0f64..0.45,
            lam in 0.0f64..1e7,
            pc in 0.0f64..0.5,
            bump in 0.0f64..0.05,
        ) {
            let sec = SecurityParams::default();
            let l = key_length(0.0, s1, phi, lam, &sec, pc).unwrap();
            prop_assert!(key_length(0.0, s1, phi + bump, lam, &sec, pc).unwrap() <= l);
            prop_assert!(key_length(0.0, s1, phi, lam * (1.0 + bump) + 1.0, &sec, pc).unwrap() <= l);
            prop_assert!(key_length(0.0, s1, phi, lam, &sec, (pc + bump).min(1.0)).unwrap() <= l);
            prop_assert!(key_length(0.0, s1 * (1.0 + bump), phi, lam, &sec, pc).unwrap() >= l);
            prop_assert!(l <= s1);
        }

        #[test]
        fn decoy_bounds_never_exceed_n_z(n0 in 0.0f64..1e7, n1 in 0.0f64..1e7, e in 0.0f64..0.1) {
            let mut t = TallySet::empty(TallyKind::Sampled, false);
            for (a, n) in [(Intensity::Signal, n0), (Intensity::Decoy, n1)] {
                let n = n.floor();
                *t.cells.get_mut(StateLabel::Zero, Basis::Z, a) = crate::tally::Cell { n, m: (n * e).floor() };
            }
            let b = decoy_bounds(&t, &default_profile_from_paper(), &SecurityParams::default()).unwrap();
            prop_assert!(b.s0_z >= 0.0 && b.s1_z >= 0.0);
            prop_assert!(b.s0_z + b.s1_z <= t.n_z() + 1e-9);
        }
    }
}
