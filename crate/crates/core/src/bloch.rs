//! Two-level polarization states on the Poincaré sphere.
//!
//! Convention: |0⟩ ↔ +S3, |1⟩ ↔ −S3, |+⟩ ↔ +S1, circular ↔ S2. A real-amplitude
//! state cos(θ/2)|0⟩ + sin(θ/2)|1⟩ sits on the S1–S3 great circle at Bloch
//! vector (sin θ, 0, cos θ), so θ is the polar angle measured from +S3 towards +S1.
//! Angles cross the public API in degrees.

use serde::{Deserialize, Serialize};

use crate::error::{QkdError, Result};

const PURE_TOL: f64 = 1e-9;
const DOP_TOL: f64 = 1e-6;

/// A pure polarization state stored as its unit Bloch vector (s1, s2, s3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PureState {
    bloch: [f64; 3],
}

impl PureState {
    /// Great-circle state at polar angle `theta_deg`.
    pub fn from_theta(theta_deg: f64) -> Self {
        let t = theta_deg.to_radians();
        PureState {
            bloch: [t.sin(), 0.0, t.cos()],
        }
    }

    /// Accepts only unit vectors (within 1e-9).
    pub fn from_bloch(bloch: [f64; 3]) -> Result<Self> {
        let norm = norm3(bloch);
        if !norm.is_finite() || (norm - 1.0).abs() > PURE_TOL {
            return Err(QkdError::NotPure { norm });
        }
        Ok(PureState { bloch })
    }

    pub fn bloch(&self) -> [f64; 3] {
        self.bloch
    }

    /// Polar angle in the S1–S3 plane, in (−180, 180]. Ignores any S2 component.
    pub fn theta_deg(&self) -> f64 {
        self.bloch[0].atan2(self.bloch[2]).to_degrees()
    }

    /// Out-of-plane (circular) component.
    pub fn s2(&self) -> f64 {
        self.bloch[1]
    }

    /// Real amplitudes (⟨0|ψ⟩, ⟨1|ψ⟩) of a great-circle state, with the global
    /// sign chosen so the amplitude on `reference` is non-negative.
    pub fn amplitudes(&self, reference: AmplitudeReference) -> [f64; 2] {
        let half = self.theta_deg().to_radians() / 2.0;
        let amp = [half.cos(), half.sin()];
        let flip = match reference {
            AmplitudeReference::Zero => amp[0] < 0.0,
            AmplitudeReference::One => amp[1] < 0.0,
        };
        if flip {
            [-amp[0], -amp[1]]
        } else {
            amp
        }
    }

    /// Rotation about the S2 axis, i.e. θ → θ + angle for great-circle states.
    pub fn rotated(&self, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let [x, y, z] = self.bloch;
        PureState {
            bloch: [x * c + z * s, y, z * c - x * s],
        }
    }

    pub fn to_stokes(&self, intensity: f64) -> StokesVector {
        StokesVector {
            s0: intensity,
            s1: intensity * self.bloch[0],
            s2: intensity * self.bloch[1],
            s3: intensity * self.bloch[2],
        }
    }
}

/// Which computational-basis amplitude is kept non-negative when a great-circle
/// state is written as a real 2-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmplitudeReference {
    Zero,
    One,
}

/// Shorthand for [`PureState::from_theta`].
pub fn state_from_theta(theta_deg: f64) -> PureState {
    PureState::from_theta(theta_deg)
}

/// Fidelity |⟨a|b⟩|² = (1 + a·b)/2.
pub fn overlap(a: &PureState, b: &PureState) -> Result<f64> {
    for s in [a, b] {
        let norm = norm3(s.bloch);
        if (norm - 1.0).abs() > PURE_TOL {
            return Err(QkdError::NotPure { norm });
        }
    }
    let dot: f64 = a.bloch.iter().zip(b.bloch.iter()).map(|(x, y)| x * y).sum();
    Ok(((1.0 + dot) / 2.0).clamp(0.0, 1.0))
}

/// Binary Shannon entropy in bits.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(QkdError::InvalidParameter(format!(
            "binary entropy argument {p} outside [0, 1]"
        )));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

/// Stokes parameters in linear intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesVector {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    /// Validating constructor: requires s0 > 0 and degree of polarization ≤ 1
    /// (1e-6 relative slack).
    pub fn new(s0: f64, s1: f64, s2: f64, s3: f64) -> Result<Self> {
        let s = StokesVector { s0, s1, s2, s3 };
        if !(s0 > 0.0) || ![s1, s2, s3].iter().all(|v| v.is_finite()) {
            return Err(QkdError::ZeroIntensity);
        }
        if s.polarized_intensity() > s0 * (1.0 + DOP_TOL) {
            return Err(QkdError::InvalidParameter(format!(
                "degree of polarization {} exceeds 1",
                s.degree_of_polarization()
            )));
        }
        Ok(s)
    }

    pub fn polarized_intensity(&self) -> f64 {
        norm3([self.s1, self.s2, self.s3])
    }

    pub fn degree_of_polarization(&self) -> f64 {
        self.polarized_intensity() / self.s0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.s0, self.s1, self.s2, self.s3]
    }
}

/// Closest pure state to a measured Stokes vector and the fraction of the
/// intensity that was unpolarized (0 for a pure input).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub state: PureState,
    pub depolarization: f64,
}

pub fn stokes_to_state(s: &StokesVector) -> Result<Projection> {
    if !(s.s0 > 0.0) {
        return Err(QkdError::ZeroIntensity);
    }
    let p = s.polarized_intensity();
    if p <= 0.0 || !p.is_finite() {
        return Err(QkdError::Unpolarized);
    }
    let bloch = [s.s1 / p, s.s2 / p, s.s3 / p];
    Ok(Projection {
        state: PureState { bloch },
        depolarization: (1.0 - p / s.s0).max(0.0),
    })
}

/// Normalized weighted vector sum of Bloch vectors. `None` when the sum
/// vanishes or no positive weight is supplied.
pub fn mean_direction<'a>(
    weighted: impl IntoIterator<Item = (&'a PureState, f64)>,
) -> Option<PureState> {
    let mut acc = [0.0; 3];
    for (s, w) in weighted {
        for (a, b) in acc.iter_mut().zip(s.bloch.iter()) {
            *a += w * b;
        }
    }
    let n = norm3(acc);
    if !(n > 1e-12) {
        return None;
    }
    Some(PureState {
        bloch: [acc[0] / n, acc[1] / n, acc[2] / n],
    })
}

/// Wraps an angle into (−180, 180].
pub fn wrap_deg(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theta_anchors() {
        let z = state_from_theta(0.0).bloch();
        assert!(close(z[0], 0.0, 1e-15) && close(z[2], 1.0, 1e-15));
        let p = state_from_theta(90.0).bloch();
        assert!(close(p[0], 1.0, 1e-15) && close(p[2], 0.0, 1e-15));
        // Table-2 θ0 = 8.0°, frozen from direct trigonometry.
        let s = state_from_theta(8.0).bloch();
        assert!(close(s[0], 0.13917, 5e-6), "{s:?}");
        assert_eq!(s[1], 0.0);
        assert!(close(s[2], 0.99027, 5e-6), "{s:?}");
    }

    #[test]
    fn overlap_examples() {
        let a = state_from_theta(0.0);
        assert!(close(overlap(&a, &a).unwrap(), 1.0, 1e-15));
        assert!(close(
            overlap(&a, &state_from_theta(180.0)).unwrap(),
            0.0,
            1e-15
        ));

        // Oracle: explicit inner product of the real 2-vectors.
        let amp = |t: f64| [(t.to_radians() / 2.0).cos(), (t.to_radians() / 2.0).sin()];
        let (u, v) = (amp(8.0), amp(165.6));
        let inner = u[0] * v[0] + u[1] * v[1];
        let expect = inner * inner;
        assert!(close(expect, 0.03772, 1e-5));
        let got = overlap(&state_from_theta(8.0), &state_from_theta(165.6)).unwrap();
        assert!(close(got, expect, 1e-12));
    }

    #[test]
    fn overlap_rejects_non_unit() {
        let bad = PureState {
            bloch: [0.5, 0.0, 0.5],
        };
        assert!(matches!(
            overlap(&bad, &state_from_theta(0.0)),
            Err(QkdError::NotPure { .. })
        ));
        assert!(PureState::from_bloch([0.0, 0.0, 1.1]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let p: f64 = 0.035;
        let oracle = -(p.ln() * p + (1.0 - p).ln() * (1.0 - p)) / std::f64::consts::LN_2;
        assert!(close(oracle, 0.21887, 2e-5));
        assert!(close(binary_entropy(p).unwrap(), oracle, 1e-14));
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn stokes_projection_examples() {
        let z = stokes_to_state(&StokesVector::new(1.0, 0.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(close(z.state.theta_deg(), 0.0, 1e-12));
        let p = stokes_to_state(&StokesVector::new(2.0, 2.0, 0.0, 0.0).unwrap()).unwrap();
        assert!(close(p.state.theta_deg(), 90.0, 1e-12));
        assert_eq!(p.depolarization, 0.0);
        let d = stokes_to_state(&StokesVector::new(1.0, 0.5, 0.0, 0.5).unwrap()).unwrap();
        let b = d.state.bloch();
        assert!(close(b[0], FRAC_1_SQRT_2, 1e-4) && close(b[2], FRAC_1_SQRT_2, 1e-4));
        assert!(close(d.depolarization, 0.2929, 1e-4));
    }

    #[test]
    fn stokes_errors() {
        assert!(matches!(
            StokesVector::new(0.0, 0.0, 0.0, 0.0),
            Err(QkdError::ZeroIntensity)
        ));
        assert!(StokesVector::new(1.0, 1.0, 1.0, 0.0).is_err());
        let raw = StokesVector {
            s0: 0.0,
            s1: 0.0,
            s2: 0.0,
            s3: 0.0,
        };
        assert!(matches!(
            stokes_to_state(&raw),
            Err(QkdError::ZeroIntensity)
        ));
        let flat = StokesVector::new(1.0, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(stokes_to_state(&flat), Err(QkdError::Unpolarized)));
    }

    #[test]
    fn amplitude_sign_follows_reference() {
        let s = state_from_theta(-4.0);
        assert!(s.amplitudes(AmplitudeReference::Zero)[0] > 0.0);
        let t = state_from_theta(185.0);
        let amp = t.amplitudes(AmplitudeReference::One);
        assert!(amp[1] > 0.0);
        assert!(close(amp[0], -(2.5f64.to_radians().sin()), 1e-12));
    }

    #[test]
    fn rotation_shifts_theta() {
        let s = state_from_theta(10.0).rotated(25.0);
        assert!(close(s.theta_deg(), 35.0, 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn overlap_symmetric(a in -720.0f64..720.0, b in -720.0f64..720.0) {
            let (sa, sb) = (state_from_theta(a), state_from_theta(b));
            let ab = overlap(&sa, &sb).unwrap();
            prop_assert!((ab - overlap(&sb, &sa).unwrap()).abs() < 1e-15);
            prop_assert!((overlap(&sa, &sa).unwrap() - 1.0).abs() < 1e-15);
            let half = ((a - b).to_radians() / 2.0).cos();
            prop_assert!((ab - half * half).abs() < 1e-12);
        }

        #[test]
        fn entropy_symmetric(p in 0.0f64..=1.0) {
            let h = binary_entropy(p).unwrap();
            prop_assert!((h - binary_entropy(1.0 - p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn theta_round_trip(t in -1000.0f64..1000.0) {
            let back = state_from_theta(t).theta_deg();
            prop_assert!(wrap_deg(back - t).abs() < 1e-9);
        }
    }
}
