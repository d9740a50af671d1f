//! Transmitter model: per-pulse state, intensity and phase-coherence draws with
//! nearest-neighbour correlations in both polarization angle and intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bloch::{mean_direction, PureState};
use crate::error::{QkdError, Result};
use crate::labels::{Intensity, PerIntensity, PerState, StateLabel};

/// Largest correlation angle accepted by [`SourceProfile::validate`].
pub const MAX_DELTA_DEG: f64 = 90.0;

const PROB_TOL: f64 = 1e-9;

/// Imperfection tables for Alice's transmitter.
///
/// `delta_deg[j][k]` is the shift of state `j`'s angle when the previous pulse
/// carried state `k`; `mu_conditional[a][b]` is the mean photon number of
/// intensity `a` following intensity `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProfile {
    pub theta_deg: PerState<f64>,
    pub delta_deg: PerState<PerState<f64>>,
    pub mu: PerIntensity<f64>,
    pub mu_conditional: PerIntensity<PerIntensity<f64>>,
    pub phase_coherence: f64,
    pub p_state: PerState<f64>,
    pub p_intensity: PerIntensity<f64>,
}

impl Default for SourceProfile {
    fn default() -> Self {
        default_profile_from_paper()
    }
}

/// Reference transmitter settings and imperfections of the 5 GHz source:
/// average angles and worst-case correlation angles, signal/decoy 0.3/0.15
/// sent with probability 0.6/0.4, ±3 % conditional intensities and
/// a phase-coherence probability of 0.0019.
pub fn default_profile_from_paper() -> SourceProfile {
    let theta = PerState::new(8.0, 165.6, 90.0);
    let max_dev = PerState::new(6.3, 6.9, 8.0);
    // +max after |0⟩, −max after |1⟩, unshifted after |+⟩.
    let delta = PerState::from_fn(|j| PerState::new(max_dev[j], -max_dev[j], 0.0));
    let mu = PerIntensity::new(0.3, 0.15);
    let mu_conditional =
        PerIntensity::from_fn(|a| PerIntensity::new(mu[a] * (1.0 - 0.03), mu[a] * (1.0 + 0.03)));
    let p_z = 0.9;
    SourceProfile {
        theta_deg: theta,
        delta_deg: delta,
        mu,
        mu_conditional,
        phase_coherence: 0.0019,
        p_state: PerState::new(p_z / 2.0, p_z / 2.0, 1.0 - p_z),
        p_intensity: PerIntensity::new(0.6, 0.4),
    }
}

impl SourceProfile {
    /// Flawless source with the given protocol settings: ideal angles, no
    /// correlations, unconditional intensities, full phase randomization.
    pub fn ideal(mu_signal: f64, mu_decoy: f64, p_signal: f64, p_z: f64) -> Self {
        let mu = PerIntensity::new(mu_signal, mu_decoy);
        SourceProfile {
            theta_deg: PerState::from_fn(StateLabel::ideal_theta_deg),
            delta_deg: PerState::default(),
            mu,
            mu_conditional: PerIntensity::from_fn(|a| PerIntensity::new(mu[a], mu[a])),
            phase_coherence: 0.0,
            p_state: PerState::new(p_z / 2.0, p_z / 2.0, 1.0 - p_z),
            p_intensity: PerIntensity::new(p_signal, 1.0 - p_signal),
        }
    }

    /// Probability that Alice prepares a Z-basis state.
    pub fn p_z(&self) -> f64 {
        self.p_state.zero + self.p_state.one
    }

    /// Replaces the protocol knobs (intensities, their probabilities and the
    /// basis bias) while keeping the imperfection structure: conditional
    /// intensities keep their relative deviation.
    pub fn with_protocol(&self, mu_signal: f64, mu_decoy: f64, p_signal: f64, p_z: f64) -> Self {
        let mut out = self.clone();
        let new_mu = PerIntensity::new(mu_signal, mu_decoy);
        for a in Intensity::ALL {
            for b in Intensity::ALL {
                let rel = if self.mu[a] > 0.0 {
                    self.mu_conditional[a][b] / self.mu[a]
                } else {
                    1.0
                };
                out.mu_conditional[a][b] = new_mu[a] * rel;
            }
        }
        out.mu = new_mu;
        out.p_intensity = PerIntensity::new(p_signal, 1.0 - p_signal);
        out.p_state = PerState::new(p_z / 2.0, p_z / 2.0, 1.0 - p_z);
        out
    }

    /// Same profile with every correlation removed.
    pub fn without_correlations(&self) -> Self {
        let mut out = self.clone();
        out.delta_deg = PerState::default();
        out.mu_conditional = PerIntensity::from_fn(|a| PerIntensity::new(self.mu[a], self.mu[a]));
        out
    }

    pub fn validate(&self) -> Result<()> {
        check_distribution("p_state", self.p_state.iter().map(|(_, p)| *p))?;
        check_distribution("p_intensity", self.p_intensity.iter().map(|(_, p)| *p))?;
        if !(self.mu.decoy > 0.0 && self.mu.signal > self.mu.decoy && self.mu.signal.is_finite()) {
            return Err(QkdError::Config(format!(
                "mean photon numbers must satisfy signal > decoy > 0 (got {} and {})",
                self.mu.signal, self.mu.decoy
            )));
        }
        for a in Intensity::ALL {
            for b in Intensity::ALL {
                let m = self.mu_conditional[a][b];
                if !(m >= 0.0 && m.is_finite()) {
                    return Err(QkdError::Config(format!(
                        "mu_conditional.{a}.{b} = {m} must be a finite non-negative number"
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.phase_coherence) {
            return Err(QkdError::Config(format!(
                "phase_coherence {} outside [0, 1]",
                self.phase_coherence
            )));
        }
        for j in StateLabel::ALL {
            if !self.theta_deg[j].is_finite() {
                return Err(QkdError::Config(format!("theta_deg.{j} is not finite")));
            }
            for k in StateLabel::ALL {
                let d = self.delta_deg[j][k];
                if !(d.abs() <= MAX_DELTA_DEG) {
                    return Err(QkdError::Config(format!(
                        "delta_deg[{j}|{k}] = {d} exceeds ±{MAX_DELTA_DEG}°"
                    )));
                }
            }
        }
        Ok(())
    }

    /// θ_{j|k}; the very first pulse has no predecessor and no shift.
    pub fn theta_actual(&self, j: StateLabel, prev: Option<StateLabel>) -> f64 {
        self.theta_deg[j] + prev.map_or(0.0, |k| self.delta_deg[j][k])
    }

    pub fn mu_actual(&self, a: Intensity, prev: Option<Intensity>) -> f64 {
        prev.map_or(self.mu[a], |b| self.mu_conditional[a][b])
    }
}

fn check_distribution(name: &str, probs: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(QkdError::Config(format!(
                "{name}: probability {p} outside [0, 1]"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(QkdError::Config(format!(
            "{name}: probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// One emitted pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub index: u64,
    pub state: StateLabel,
    pub intensity: Intensity,
    pub theta_deg: f64,
    pub mu: f64,
    pub coherent_with_prev: bool,
}

/// Inverse-CDF draws of the i.i.d. labels. Shared with the Monte Carlo driver
/// so both consume the RNG identically.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LabelSampler {
    state_cdf: [f64; 2],
    p_signal: f64,
    p_coherent: f64,
}

impl LabelSampler {
    pub(crate) fn new(profile: &SourceProfile) -> Self {
        let p = &profile.p_state;
        LabelSampler {
            state_cdf: [p.zero, p.zero + p.one],
            p_signal: profile.p_intensity.signal,
            p_coherent: profile.phase_coherence,
        }
    }

    #[inline]
    pub(crate) fn state<R: Rng + ?Sized>(&self, rng: &mut R) -> StateLabel {
        let u: f64 = rng.random();
        if u < self.state_cdf[0] {
            StateLabel::Zero
        } else if u < self.state_cdf[1] {
            StateLabel::One
        } else {
            StateLabel::Plus
        }
    }

    #[inline]
    pub(crate) fn intensity<R: Rng + ?Sized>(&self, rng: &mut R) -> Intensity {
        let u: f64 = rng.random();
        if u < self.p_signal {
            Intensity::Signal
        } else {
            Intensity::Decoy
        }
    }

    #[inline]
    pub(crate) fn coherent<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        let u: f64 = rng.random();
        u < self.p_coherent
    }
}

/// Deterministic pulse stream; see [`emit_sequence`].
pub struct PulseStream {
    profile: SourceProfile,
    sampler: LabelSampler,
    rng: ChaCha8Rng,
    next: u64,
    len: u64,
    prev: Option<(StateLabel, Intensity)>,
}

impl Iterator for PulseStream {
    type Item = PulseRecord;

    fn next(&mut self) -> Option<PulseRecord> {
        if self.next >= self.len {
            return None;
        }
        let state = self.sampler.state(&mut self.rng);
        let intensity = self.sampler.intensity(&mut self.rng);
        let coherent = self.sampler.coherent(&mut self.rng);
        let rec = PulseRecord {
            index: self.next,
            state,
            intensity,
            theta_deg: self.profile.theta_actual(state, self.prev.map(|p| p.0)),
            mu: self.profile.mu_actual(intensity, self.prev.map(|p| p.1)),
            coherent_with_prev: self.prev.is_some() && coherent,
        };
        self.prev = Some((state, intensity));
        self.next += 1;
        Some(rec)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = (self.len - self.next) as usize;
        (rest, Some(rest))
    }
}

/// `n` pulses with i.i.d. labels and predecessor-conditioned angle and
/// intensity. Output depends only on `(profile, n, seed)`.
pub fn emit_sequence(profile: &SourceProfile, n: u64, seed: u64) -> Result<PulseStream> {
    if n == 0 {
        return Err(QkdError::InvalidParameter(
            "pulse count must be at least 1".into(),
        ));
    }
    profile.validate()?;
    Ok(PulseStream {
        profile: profile.clone(),
        sampler: LabelSampler::new(profile),
        rng: ChaCha8Rng::seed_from_u64(seed),
        next: 0,
        len: n,
        prev: None,
    })
}

/// Average of state `j` over its predecessors, weighted by how often each
/// predecessor occurs: the normalized Bloch-vector sum of the conditional
/// states, i.e. the weighted circular mean of θ_{j|k}.
pub fn mean_state(profile: &SourceProfile, j: StateLabel) -> PureState {
    mean_state_weighted(profile, j, &profile.p_state)
}

/// As [`mean_state`] with explicit predecessor weights.
pub fn mean_state_weighted(
    profile: &SourceProfile,
    j: StateLabel,
    weights: &PerState<f64>,
) -> PureState {
    let states: Vec<(PureState, f64)> = StateLabel::ALL
        .iter()
        .map(|&k| {
            (
                PureState::from_theta(profile.theta_actual(j, Some(k))),
                weights[k],
            )
        })
        .collect();
    mean_direction(states.iter().map(|(s, w)| (s, *w)))
        .unwrap_or_else(|| PureState::from_theta(profile.theta_deg[j]))
}
