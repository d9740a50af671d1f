//! Bob's side of the link: fiber and insertion loss, passive basis choice and
//! four threshold detectors with dark counts.
//!
//! A coherent pulse of mean photon number μ split over independent loss paths
//! gives independent Poisson photon numbers at each detector, so detector `d`
//! fires with probability 1 − (1 − p_dark)·exp(−μ·t·p_route(d)·p_proj(d))
//! independently of the others.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::bloch::PureState;
use crate::error::{QkdError, Result};
use crate::labels::{Basis, Detector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkModel {
    pub fiber_length_km: f64,
    pub attenuation_db_per_km: f64,
    pub bob_insertion_loss_db: f64,
    pub detector_efficiency: f64,
    /// Per detector.
    pub dark_count_rate_hz: f64,
    pub dead_time_s: f64,
    pub repetition_rate_hz: f64,
    pub p_bob_z: f64,
    /// Global rotation in the S1–S3 plane applied before Bob's projection.
    pub misalignment_deg: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel::reference(151.5)
    }
}

impl LinkModel {
    /// 0.2 dB/km fiber, 1 dB inside Bob, 80 % efficient detectors with 191 Hz
    /// dark counts, 5 GHz clock, balanced passive basis choice.
    pub fn reference(fiber_length_km: f64) -> Self {
        LinkModel {
            fiber_length_km,
            attenuation_db_per_km: 0.2,
            bob_insertion_loss_db: 1.0,
            detector_efficiency: 0.8,
            dark_count_rate_hz: 191.0,
            dead_time_s: 0.0,
            repetition_rate_hz: 5e9,
            p_bob_z: 0.5,
            misalignment_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QkdError::Config(msg));
        if !(self.fiber_length_km >= 0.0 && self.fiber_length_km.is_finite()) {
            return bad(format!(
                "fiber_length_km {} must be non-negative",
                self.fiber_length_km
            ));
        }
        if !(self.attenuation_db_per_km > 0.0 && self.attenuation_db_per_km.is_finite()) {
            return bad(format!(
                "attenuation_db_per_km {} must be positive",
                self.attenuation_db_per_km
            ));
        }
        if !self.bob_insertion_loss_db.is_finite() {
            return bad("bob_insertion_loss_db must be finite".into());
        }
        if !(self.detector_efficiency > 0.0 && self.detector_efficiency <= 1.0) {
            return bad(format!(
                "detector_efficiency {} outside (0, 1]",
                self.detector_efficiency
            ));
        }
        if !(self.dark_count_rate_hz >= 0.0 && self.dark_count_rate_hz.is_finite()) {
            return bad("dark_count_rate_hz must be non-negative".into());
        }
        if !(self.dead_time_s >= 0.0 && self.dead_time_s.is_finite()) {
            return bad("dead_time_s must be non-negative".into());
        }
        if !(self.repetition_rate_hz > 0.0 && self.repetition_rate_hz.is_finite()) {
            return bad("repetition_rate_hz must be positive".into());
        }
        if !(self.p_bob_z > 0.0 && self.p_bob_z < 1.0) {
            return bad(format!("p_bob_z {} outside (0, 1)", self.p_bob_z));
        }
        if !self.misalignment_deg.is_finite() {
            return bad("misalignment_deg must be finite".into());
        }
        if self.dark_probability() > 1.0 {
            return bad("dark count rate exceeds one count per gate".into());
        }
        Ok(())
    }

    pub fn total_loss_db(&self) -> f64 {
        self.fiber_length_km * self.attenuation_db_per_km + self.bob_insertion_loss_db
    }

    /// Dark-count probability per detector per gate.
    pub fn dark_probability(&self) -> f64 {
        self.dark_count_rate_hz / self.repetition_rate_hz
    }

    /// Number of gates a detector stays blind after firing.
    pub fn dead_slots(&self) -> u64 {
        (self.dead_time_s * self.repetition_rate_hz).ceil() as u64
    }

    pub fn route_probability(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Z => self.p_bob_z,
            Basis::X => 1.0 - self.p_bob_z,
        }
    }
}

/// End-to-end single-photon detection probability including detector efficiency.
pub fn transmittance(model: &LinkModel) -> f64 {
    10f64.powf(-model.total_loss_db() / 10.0) * model.detector_efficiency
}

/// Mean fraction of the pulse's photons that reach each detector:
/// t · p_route(d) · p_proj(d).
pub fn detection_efficiencies(state: &PureState, model: &LinkModel) -> [f64; 4] {
    let t = transmittance(model);
    let r = state.rotated(model.misalignment_deg).bloch();
    Detector::ALL.map(|d| {
        let axis = d.bloch_axis();
        let dot = r[0] * axis[0] + r[1] * axis[1] + r[2] * axis[2];
        let proj = ((1.0 + dot) / 2.0).clamp(0.0, 1.0);
        t * model.route_probability(d.basis()) * proj
    })
}

/// Per-detector firing probabilities (Z0, Z1, X+, X−) for one pulse.
pub fn click_probabilities(state: &PureState, mu: f64, model: &LinkModel) -> Result<[f64; 4]> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(QkdError::InvalidParameter(format!(
            "mean photon number {mu} must be ≥ 0"
        )));
    }
    let pd = model.dark_probability();
    let eta = detection_efficiencies(state, model);
    Ok(eta.map(|e| 1.0 - (1.0 - pd) * (-mu * e).exp()))
}

/// Squashing rule: no click, the single firing detector, or a uniformly
/// random pick among several firing detectors.
pub fn resolve_click<R: Rng + ?Sized>(pattern: [bool; 4], rng: &mut R) -> Option<Detector> {
    let firing = pattern.iter().filter(|f| **f).count();
    match firing {
        0 => None,
        1 => pattern.iter().position(|f| *f).map(Detector::from_index),
        n => {
            let pick = rng.random_range(0..n);
            pattern
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .nth(pick)
                .map(|(i, _)| Detector::from_index(i))
        }
    }
}

/// Probability of each resolved outcome given independent firing probabilities.
pub(crate) fn resolved_distribution(fire: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for mask in 1u8..16 {
        let mut p = 1.0;
        for (d, f) in fire.iter().enumerate() {
            p *= if mask & (1 << d) != 0 { *f } else { 1.0 - *f };
        }
        if p == 0.0 {
            continue;
        }
        let share = p / mask.count_ones() as f64;
        for (d, o) in out.iter_mut().enumerate() {
            if mask & (1 << d) != 0 {
                *o += share;
            }
        }
    }
    out
}

/// Per-pulse outcome probabilities, in total and jointly with the emitted
/// photon number being 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct OutcomeProbabilities {
    pub total: [f64; 4],
    pub vacuum: [f64; 4],
    pub single: [f64; 4],
}

/// Precomputed detection physics for one (state angle, μ) combination.
#[derive(Debug, Clone)]
pub(crate) struct PulseKernel {
    pub mu: f64,
    pub eta: [f64; 4],
    eta_tot: f64,
    p_dark: f64,
    /// P(at least one photon reaches some detector).
    p_detect: f64,
    route_cdf: [f64; 3],
    undetected: Option<Poisson<f64>>,
}

impl PulseKernel {
    pub fn new(state: &PureState, mu: f64, model: &LinkModel) -> Self {
        let eta = detection_efficiencies(state, model);
        let eta_tot: f64 = eta.iter().sum();
        let mut route_cdf = [0.0; 3];
        let mut acc = 0.0;
        for d in 0..3 {
            acc += eta[d];
            route_cdf[d] = if eta_tot > 0.0 { acc / eta_tot } else { 0.0 };
        }
        let lost = mu * (1.0 - eta_tot).max(0.0);
        PulseKernel {
            mu,
            eta,
            eta_tot,
            p_dark: model.dark_probability(),
            p_detect: -(-mu * eta_tot).exp_m1(),
            route_cdf,
            undetected: if lost > 0.0 {
                Poisson::new(lost).ok()
            } else {
                None
            },
        }
    }

    pub fn outcome_probabilities(&self) -> OutcomeProbabilities {
        let pd = self.p_dark;
        let fire = self.eta.map(|e| 1.0 - (1.0 - pd) * (-self.mu * e).exp());
        let total = resolved_distribution(fire);

        let dark_only = resolved_distribution([pd; 4]);
        let p0 = (-self.mu).exp();
        let vacuum = dark_only.map(|v| p0 * v);

        let p1 = self.mu * p0;
        let mut single = dark_only.map(|v| (1.0 - self.eta_tot).max(0.0) * v);
        for (e, &eta_e) in self.eta.iter().enumerate() {
            let mut f = [pd; 4];
            f[e] = 1.0;
            let forced = resolved_distribution(f);
            for (s, v) in single.iter_mut().zip(forced) {
                *s += eta_e * v;
            }
        }
        let single = single.map(|v| p1 * v);
        OutcomeProbabilities {
            total,
            vacuum,
            single,
        }
    }

    /// Samples which detectors physically fire and the emitted photon number
    /// (drawn only when something fired; 0 otherwise).
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (u8, u32) {
        let mut mask = 0u8;
        let mut detected = 0u32;
        let u: f64 = rng.random();
        if u < self.p_detect {
            detected = self.zero_truncated_photons(rng);
            for _ in 0..detected {
                let v: f64 = rng.random();
                let d = self.route_cdf.iter().position(|c| v < *c).unwrap_or(3);
                mask |= 1 << d;
            }
        }
        mask |= sample_dark_mask(self.p_dark, rng);
        if mask == 0 {
            return (0, 0);
        }
        let lost = self.undetected.map_or(0, |p| p.sample(rng) as u32);
        (mask, detected + lost)
    }

    fn zero_truncated_photons<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let lambda = self.mu * self.eta_tot;
        let u: f64 = rng.random();
        let norm = -(-lambda).exp_m1();
        let mut term = (-lambda).exp() * lambda / norm;
        let mut cdf = term;
        let mut k = 1u32;
        while u >= cdf && k < 1000 {
            k += 1;
            term *= lambda / k as f64;
            cdf += term;
        }
        k
    }
}

/// Which detectors produce a dark count in one gate.
#[inline]
pub(crate) fn sample_dark_mask<R: Rng + ?Sized>(p_dark: f64, rng: &mut R) -> u8 {
    if p_dark <= 0.0 {
        return 0;
    }
    let none = (1.0 - p_dark).powi(4);
    let u: f64 = rng.random();
    if u >= 1.0 - none {
        return 0;
    }
    // Condition sequentially on at least one firing among the remaining detectors.
    let mut mask = 0u8;
    for d in 0..4 {
        let p = if mask == 0 {
            p_dark / (1.0 - (1.0 - p_dark).powi(4 - d))
        } else {
            p_dark
        };
        let v: f64 = rng.random();
        if v < p {
            mask |= 1 << d;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::state_from_theta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lossless() -> LinkModel {
        LinkModel {
            fiber_length_km: 0.0,
            bob_insertion_loss_db: 0.0,
            detector_efficiency: 1.0,
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(0.0)
        }
    }

    #[test]
    fn transmittance_examples() {
        let m = LinkModel {
            bob_insertion_loss_db: 0.0,
            detector_efficiency: 1.0,
            ..LinkModel::reference(101.0)
        };
        assert!((transmittance(&m) - 9.55e-3).abs() < 5e-6);
        assert!((transmittance(&m) - 10f64.powf(-2.02)).abs() < 1e-15);
        assert_eq!(transmittance(&lossless()), 1.0);
        let m = LinkModel {
            bob_insertion_loss_db: 0.0,
            ..LinkModel::reference(151.5)
        };
        assert!((transmittance(&m) - 7.46e-4).abs() < 1e-6);
        assert!((transmittance(&m) - 0.8 * 10f64.powf(-3.03)).abs() < 1e-15);
    }

    #[test]
    fn transmittance_monotone() {
        let mut prev = f64::INFINITY;
        for km in 0..300 {
            let t = transmittance(&LinkModel::reference(km as f64));
            assert!(t < prev);
            prev = t;
        }
        let mut prev = f64::INFINITY;
        for tenth_db in 0..100 {
            let m = LinkModel {
                bob_insertion_loss_db: tenth_db as f64 / 10.0,
                ..LinkModel::reference(50.0)
            };
            assert!(transmittance(&m) < prev);
            prev = transmittance(&m);
        }
    }

    #[test]
    fn vacuum_without_dark_counts_never_clicks() {
        let m = LinkModel {
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(10.0)
        };
        let p = click_probabilities(&state_from_theta(0.0), 0.0, &m).unwrap();
        assert_eq!(p, [0.0; 4]);
        assert!(click_probabilities(&state_from_theta(0.0), -0.1, &m).is_err());
    }

    #[test]
    fn perfect_projection_limit() {
        let p = click_probabilities(&state_from_theta(0.0), 1e6, &lossless()).unwrap();
        // Passive basis choice: every detector sees its own share of the pulse,
        // so a bright |0⟩ saturates Z0 while Z1 stays dark.
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        assert!((p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weak_pulse_closed_form() {
        // t chosen so that t·p_route matches the worked example (t = 9.55e-3, p_route = 0.45).
        let m = LinkModel {
            bob_insertion_loss_db: 0.0,
            detector_efficiency: 1.0,
            p_bob_z: 0.45,
            dark_count_rate_hz: 191.0,
            ..LinkModel::reference(101.0)
        };
        let t = transmittance(&m);
        let pd: f64 = 191.0 / 5e9;
        let oracle = 1.0 - (-0.3f64 * t * 0.45).exp() * (1.0 - pd);
        let p = click_probabilities(&state_from_theta(0.0), 0.3, &m).unwrap();
        assert!((p[0] - oracle).abs() < 1e-15);
        assert!((p[0] - (1.289e-3 + 3.8e-8)).abs() < 1e-6);
    }

    #[test]
    fn resolve_click_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(resolve_click([false; 4], &mut rng), None);
        assert_eq!(
            resolve_click([true, false, false, false], &mut rng),
            Some(Detector::Z0)
        );
        let trials = 100_000;
        let z0 = (0..trials)
            .filter(|_| resolve_click([true, true, false, false], &mut rng) == Some(Detector::Z0))
            .count() as f64;
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((z0 - trials as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn ideal_states_only_err_through_dark_counts() {
        let m = LinkModel {
            dark_count_rate_hz: 0.0,
            ..LinkModel::reference(20.0)
        };
        let k = PulseKernel::new(&state_from_theta(0.0), 0.5, &m);
        let o = k.outcome_probabilities();
        assert!(o.total[Detector::Z1.index()].abs() < 1e-18);
        let k = PulseKernel::new(&state_from_theta(90.0), 0.5, &m);
        assert!(k.outcome_probabilities().total[Detector::XMinus.index()].abs() < 1e-18);
    }

    #[test]
    fn outcome_classes_are_consistent() {
        let m = LinkModel {
            dark_count_rate_hz: 5e7,
            ..LinkModel::reference(5.0)
        };
        let k = PulseKernel::new(&state_from_theta(30.0), 0.4, &m);
        let o = k.outcome_probabilities();
        for d in 0..4 {
            assert!(o.vacuum[d] + o.single[d] <= o.total[d] + 1e-15);
        }
        // Single-click gain equals 1 − P(no detector fires).
        let fire = click_probabilities(&state_from_theta(30.0), 0.4, &m).unwrap();
        let none: f64 = fire.iter().map(|f| 1.0 - f).product();
        assert!((o.total.iter().sum::<f64>() - (1.0 - none)).abs() < 1e-14);
    }

    #[test]
    fn sampler_matches_outcome_probabilities() {
        let m = LinkModel {
            dark_count_rate_hz: 2e7,
            ..LinkModel::reference(15.0)
        };
        let k = PulseKernel::new(&state_from_theta(40.0), 0.6, &m);
        let o = k.outcome_probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 2_000_000;
        let mut counts = [0f64; 4];
        let mut singles = [0f64; 4];
        for _ in 0..n {
            let (mask, photons) = k.sample(&mut rng);
            let pattern = [0, 1, 2, 3].map(|d| mask & (1 << d) != 0);
            if let Some(d) = resolve_click(pattern, &mut rng) {
                counts[d.index()] += 1.0;
                if photons == 1 {
                    singles[d.index()] += 1.0;
                }
            }
        }
        for d in 0..4 {
            for (got, p) in [(counts[d], o.total[d]), (singles[d], o.single[d])] {
                let exp = p * n as f64;
                assert!(
                    (got - exp).abs() < 3.5 * exp.sqrt().max(1.0),
                    "d{d}: {got} vs {exp}"
                );
            }
        }
    }

    #[test]
    fn dark_mask_conditional_sampling_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 0.05;
        let n = 400_000;
        let mut per = [0f64; 4];
        for _ in 0..n {
            let m = sample_dark_mask(p, &mut rng);
            for (d, c) in per.iter_mut().enumerate() {
                if m & (1 << d) != 0 {
                    *c += 1.0;
                }
            }
        }
        for c in per {
            let exp = p * n as f64;
            assert!((c - exp).abs() < 3.5 * (exp * (1.0 - p)).sqrt());
        }
    }
}
