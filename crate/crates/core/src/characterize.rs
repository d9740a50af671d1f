//! Source characterization: rotating-QWP Stokes polarimetry and correlation
//! angles, decoy-intensity correlation statistics, and the interferometric
//! phase-coherence estimate.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bloch::{mean_direction, stokes_to_state, wrap_deg, PureState, StokesVector};
use crate::error::{QkdError, Result};
use crate::labels::{Intensity, PerIntensity, PerState, StateLabel};
use crate::source::SourceProfile;

/// Minimum number of distinct QWP angles accepted by the fit.
pub const MIN_QWP_ANGLES: usize = 8;

/// Transmitted intensity after a QWP at `rho_deg` followed by a polarizer at 0°.
pub fn qwp_forward(s: &StokesVector, rho_deg: f64) -> f64 {
    let r = design_row(rho_deg);
    r[0] * s.s0 + r[1] * s.s1 + r[2] * s.s2 + r[3] * s.s3
}

fn design_row(rho_deg: f64) -> [f64; 4] {
    let t = 2.0 * rho_deg.to_radians();
    let (s, c) = t.sin_cos();
    [0.5, 0.5 * c * c, 0.5 * c * s, -0.5 * s]
}

/// Sixteen angles evenly spaced over half a turn.
pub fn default_qwp_angles() -> Vec<f64> {
    (0..16).map(|i| i as f64 * 180.0 / 16.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLabel {
    pub state: StateLabel,
    pub intensity: Intensity,
}

/// The 32-slot calibration pattern: every ordered pair of states and of
/// intensities occurs between neighbouring slots (cyclically).
pub fn calibration_sequence() -> Vec<SlotLabel> {
    // de Bruijn order-2 cycles: 9 state pairs, 4 intensity pairs.
    const STATES: [StateLabel; 9] = {
        use StateLabel::*;
        [Zero, Zero, One, Zero, Plus, One, One, Plus, Plus]
    };
    const INTENSITIES: [Intensity; 4] = [
        Intensity::Signal,
        Intensity::Signal,
        Intensity::Decoy,
        Intensity::Decoy,
    ];
    (0..32)
        .map(|i| SlotLabel {
            state: STATES[i % 9],
            intensity: INTENSITIES[i % 4],
        })
        .collect()
}

/// Predecessor of every slot when the pattern is repeated back to back.
pub fn cyclic_predecessors<T: Copy>(labels: &[T]) -> Vec<T> {
    let n = labels.len();
    (0..n).map(|i| labels[(i + n - 1) % n]).collect()
}

/// Polarimeter scan: mean detected intensity per slot and QWP angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QwpTrace {
    pub angles_deg: Vec<f64>,
    /// `intensities[slot][angle]`.
    pub intensities: Vec<Vec<f64>>,
    pub labels: Vec<SlotLabel>,
}

impl QwpTrace {
    pub fn validate(&self) -> Result<()> {
        if self.intensities.len() != self.labels.len() {
            return Err(QkdError::InvalidParameter(format!(
                "{} intensity rows for {} slot labels",
                self.intensities.len(),
                self.labels.len()
            )));
        }
        for (i, row) in self.intensities.iter().enumerate() {
            if row.len() != self.angles_deg.len() {
                return Err(QkdError::InvalidParameter(format!(
                    "slot {i} has {} samples",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(*v >= 0.0)) {
                return Err(QkdError::InvalidParameter(format!(
                    "slot {i} has a negative intensity"
                )));
            }
        }
        let mut distinct: Vec<f64> = self
            .angles_deg
            .iter()
            .map(|a| a.rem_euclid(180.0))
            .collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        if distinct.len() < MIN_QWP_ANGLES {
            return Err(QkdError::RankDeficient(format!(
                "{} distinct angles, need at least {MIN_QWP_ANGLES}",
                distinct.len()
            )));
        }
        Ok(())
    }

    /// Noiseless trace of the given per-slot Stokes vectors.
    pub fn synthesize(
        stokes: &[StokesVector],
        labels: Vec<SlotLabel>,
        angles_deg: Vec<f64>,
    ) -> Self {
        let intensities = stokes
            .iter()
            .map(|s| angles_deg.iter().map(|&r| qwp_forward(s, r)).collect())
            .collect();
        QwpTrace {
            angles_deg,
            intensities,
            labels,
        }
    }

    /// Applies independent Gaussian multiplicative noise of relative size `rel`.
    pub fn with_noise<R: Rng>(&self, rel: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, rel).expect("finite noise level");
        let mut out = self.clone();
        for v in out.intensities.iter_mut().flatten() {
            *v = (*v * (1.0 + n.sample(rng))).max(0.0);
        }
        out
    }

    /// Long-format CSV: `slot,state,intensity,angle_deg,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (slot, (label, row)) in self.labels.iter().zip(&self.intensities).enumerate() {
            for (&angle_deg, &value) in self.angles_deg.iter().zip(row) {
                wr.serialize(QwpRow {
                    slot,
                    state: label.state,
                    intensity: label.intensity,
                    angle_deg,
                    value,
                })?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let rows: Vec<(usize, QwpRow)> = read_rows(r)?;
        let mut slots: BTreeMap<usize, (SlotLabel, BTreeMap<u64, f64>)> = BTreeMap::new();
        let mut angles: Vec<f64> = Vec::new();
        for (line, row) in &rows {
            let label = SlotLabel {
                state: row.state,
                intensity: row.intensity,
            };
            let entry = slots.entry(row.slot).or_insert((label, BTreeMap::new()));
            if entry.0 != label {
                return Err(schema(
                    *line,
                    format!("slot {} changes its label", row.slot),
                ));
            }
            if !(row.value >= 0.0) {
                return Err(schema(*line, "intensity must be non-negative".into()));
            }
            if entry.1.insert(row.angle_deg.to_bits(), row.value).is_some() {
                return Err(schema(
                    *line,
                    format!("duplicate angle {} for slot {}", row.angle_deg, row.slot),
                ));
            }
            if !angles
                .iter()
                .any(|a| a.to_bits() == row.angle_deg.to_bits())
            {
                angles.push(row.angle_deg);
            }
        }
        for (i, (&slot, (_, per_angle))) in slots.iter().enumerate() {
            if slot != i {
                return Err(schema(
                    1,
                    format!("slot indices must run 0..n, missing {i}"),
                ));
            }
            if per_angle.len() != angles.len() {
                return Err(schema(
                    1,
                    format!("slot {slot} lacks some of the {} angles", angles.len()),
                ));
            }
        }
        let labels = slots.values().map(|(l, _)| *l).collect();
        let intensities = slots
            .values()
            .map(|(_, m)| angles.iter().map(|a| m[&a.to_bits()]).collect())
            .collect();
        let trace = QwpTrace {
            angles_deg: angles,
            intensities,
            labels,
        };
        trace.validate()?;
        Ok(trace)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QwpRow {
    slot: usize,
    state: StateLabel,
    intensity: Intensity,
    angle_deg: f64,
    value: f64,
}

fn schema(row: usize, message: String) -> QkdError {
    QkdError::Schema { row, message }
}

/// Deserializes every record, tagging each with its 1-based line number.
fn read_rows<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<(usize, T)>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r);
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    let headers = match rd.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(schema(1, e.to_string())),
    };
    loop {
        match rd.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let v = rec
                    .deserialize(Some(&headers))
                    .map_err(|e| schema(line, e.to_string()))?;
                out.push((line, v));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                return Err(schema(line, e.to_string()));
            }
        }
    }
    if out.is_empty() {
        return Err(schema(1, "no data rows".into()));
    }
    Ok(out)
}

/// Least-squares Stokes vector of one slot.
pub fn fit_stokes(trace: &QwpTrace, slot: usize) -> Result<StokesVector> {
    trace.validate()?;
    let row = trace
        .intensities
        .get(slot)
        .ok_or_else(|| QkdError::InvalidParameter(format!("slot {slot} out of range")))?;
    if row.iter().all(|v| *v == 0.0) {
        return Err(QkdError::ZeroIntensity);
    }
    let n = trace.angles_deg.len();
    let a = DMatrix::from_fn(n, 4, |i, j| design_row(trace.angles_deg[i])[j]);
    let b = DVector::from_column_slice(row);
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let (max, min) = (sv.max(), sv.min());
    if !(min > 1e-10 * max) {
        return Err(QkdError::RankDeficient(format!("condition {}", max / min)));
    }
    let x = svd
        .solve(&b, 1e-12 * max)
        .map_err(|e| QkdError::RankDeficient(e.to_string()))?;
    if !(x[0] > 0.0) {
        return Err(QkdError::ZeroIntensity);
    }
    Ok(StokesVector {
        s0: x[0],
        s1: x[1],
        s2: x[2],
        s3: x[3],
    })
}

/// Per-slot fitted states (closest pure state to each Stokes vector).
pub fn fit_states(trace: &QwpTrace) -> Result<Vec<PureState>> {
    (0..trace.labels.len())
        .map(|i| Ok(stokes_to_state(&fit_stokes(trace, i)?)?.state))
        .collect()
}

/// Angle table in the layout of the usual characterization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub theta_deg: PerState<f64>,
    /// `delta_deg[j][k]`: shift of state j after predecessor k.
    pub delta_deg: PerState<PerState<f64>>,
    pub max_abs_delta_deg: PerState<f64>,
    /// Rotation applied so that θ_+ is exactly 90°.
    pub frame_rotation_deg: f64,
    /// Largest out-of-plane (S2) component among the conditional means.
    pub max_abs_s2: f64,
}

fn conditional_means(
    states: &[PureState],
    labels: &[StateLabel],
    predecessors: &[StateLabel],
) -> Result<PerState<PerState<Option<PureState>>>> {
    if states.len() != labels.len() || labels.len() != predecessors.len() {
        return Err(QkdError::InvalidParameter(
            "states, labels and predecessors differ in length".into(),
        ));
    }
    let mut out: PerState<PerState<Option<PureState>>> = PerState::default();
    for j in StateLabel::ALL {
        for k in StateLabel::ALL {
            let sel = states
                .iter()
                .zip(labels.iter().zip(predecessors))
                .filter(|(_, (l, p))| **l == j && **p == k)
                .map(|(s, _)| (s, 1.0));
            out[j][k] = mean_direction(sel);
        }
    }
    Ok(out)
}

/// Mean angles θ_j (uniform over predecessors) and correlation angles δ_{j|k},
/// in a frame rotated so that θ_+ = 90°.
pub fn extract_correlations(
    states: &[PureState],
    labels: &[StateLabel],
    predecessors: &[StateLabel],
) -> Result<CorrelationReport> {
    let cond = conditional_means(states, labels, predecessors)?;
    let mut means: PerState<PureState> = PerState::from_fn(|_| PureState::from_theta(0.0));
    for j in StateLabel::ALL {
        let mut members = Vec::new();
        for k in StateLabel::ALL {
            let s = cond[j][k]
                .ok_or_else(|| QkdError::MissingPair(format!("state {j} never follows {k}")))?;
            members.push(s);
        }
        means[j] = mean_direction(members.iter().map(|s| (s, 1.0))).ok_or_else(|| {
            QkdError::InvalidParameter(format!("conditional states of {j} cancel out"))
        })?;
    }
    let reference = means.map(|s| s.theta_deg());
    let mut report = correlations_against(&cond, &reference)?;
    let rotation = 90.0 - report.theta_deg.plus;
    report.frame_rotation_deg = rotation;
    for j in StateLabel::ALL {
        report.theta_deg[j] = wrap_deg(report.theta_deg[j] + rotation);
    }
    report.theta_deg.plus = 90.0;
    Ok(report)
}

/// δ_{j|k} against externally supplied mean angles; pairs that never occur
/// are reported as 0. No frame rotation is applied.
pub fn extract_correlations_with_reference(
    states: &[PureState],
    labels: &[StateLabel],
    predecessors: &[StateLabel],
    reference_theta_deg: &PerState<f64>,
) -> Result<CorrelationReport> {
    let cond = conditional_means(states, labels, predecessors)?;
    correlations_against(&cond, reference_theta_deg)
}

fn correlations_against(
    cond: &PerState<PerState<Option<PureState>>>,
    reference: &PerState<f64>,
) -> Result<CorrelationReport> {
    let mut delta: PerState<PerState<f64>> = PerState::default();
    let mut max_s2: f64 = 0.0;
    for j in StateLabel::ALL {
        for k in StateLabel::ALL {
            if let Some(s) = cond[j][k] {
                delta[j][k] = wrap_deg(s.theta_deg() - reference[j]);
                max_s2 = max_s2.max(s.s2().abs());
            }
        }
    }
    let max_abs = delta.map(|row| row.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max));
    Ok(CorrelationReport {
        theta_deg: *reference,
        delta_deg: delta,
        max_abs_delta_deg: max_abs,
        frame_rotation_deg: 0.0,
        max_abs_s2: max_s2,
    })
}

/// Noiseless polarimeter trace of a profile emitting the calibration pattern.
pub fn synthesize_profile_trace(
    profile: &SourceProfile,
    labels: &[SlotLabel],
    angles_deg: Vec<f64>,
) -> QwpTrace {
    let preds = cyclic_predecessors(labels);
    let stokes: Vec<StokesVector> = labels
        .iter()
        .zip(&preds)
        .map(|(l, p)| {
            let mu = profile.mu_actual(l.intensity, Some(p.intensity));
            PureState::from_theta(profile.theta_actual(l.state, Some(p.state))).to_stokes(mu)
        })
        .collect();
    QwpTrace::synthesize(&stokes, labels.to_vec(), angles_deg)
}

/// Fit every slot and extract the angle table, using cyclic predecessors.
pub fn characterize_trace(trace: &QwpTrace) -> Result<CorrelationReport> {
    let states = fit_states(trace)?;
    let labels: Vec<StateLabel> = trace.labels.iter().map(|l| l.state).collect();
    extract_correlations(&states, &labels, &cyclic_predecessors(&labels))
}

/// Conditional intensity table and its largest relative deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyCorrelationStats {
    pub mean: PerIntensity<f64>,
    /// `conditional[a][b]`: mean of intensity a after intensity b.
    pub conditional: PerIntensity<PerIntensity<f64>>,
    pub max_relative_deviation: f64,
    pub signal_to_decoy_ratio: f64,
}

pub fn decoy_correlation_stats(
    samples: &[f64],
    labels: &[Intensity],
    predecessors: &[Intensity],
) -> Result<DecoyCorrelationStats> {
    if samples.len() != labels.len() || labels.len() != predecessors.len() {
        return Err(QkdError::InvalidParameter(
            "samples, labels and predecessors differ in length".into(),
        ));
    }
    let mut sum: PerIntensity<PerIntensity<(f64, usize)>> = PerIntensity::default();
    let mut total: PerIntensity<(f64, usize)> = PerIntensity::default();
    for ((&v, &a), &b) in samples.iter().zip(labels).zip(predecessors) {
        sum[a][b].0 += v;
        sum[a][b].1 += 1;
        total[a].0 += v;
        total[a].1 += 1;
    }
    let mut conditional: PerIntensity<PerIntensity<f64>> = PerIntensity::default();
    for a in Intensity::ALL {
        for b in Intensity::ALL {
            let (s, n) = sum[a][b];
            if n == 0 {
                return Err(QkdError::MissingPair(format!("{a} never follows {b}")));
            }
            conditional[a][b] = s / n as f64;
        }
    }
    let mean = PerIntensity::from_fn(|a| total[a].0 / total[a].1 as f64);
    let mut dev: f64 = 0.0;
    for a in Intensity::ALL {
        if !(mean[a] > 0.0) {
            return Err(QkdError::ZeroIntensity);
        }
        for b in Intensity::ALL {
            dev = dev.max((conditional[a][b] / mean[a] - 1.0).abs());
        }
    }
    Ok(DecoyCorrelationStats {
        mean,
        conditional,
        max_relative_deviation: dev,
        signal_to_decoy_ratio: mean.signal / mean.decoy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensitySample {
    pub slot: usize,
    pub intensity: Intensity,
    pub value: f64,
}

/// Per-slot mean intensities of a repeated pattern; predecessors are cyclic.
pub fn read_intensity_csv<R: Read>(r: R) -> Result<Vec<IntensitySample>> {
    let rows: Vec<(usize, IntensitySample)> = read_rows(r)?;
    for (i, (line, s)) in rows.iter().enumerate() {
        if s.slot != i {
            return Err(schema(
                *line,
                format!("expected slot {i}, found {}", s.slot),
            ));
        }
        if !(s.value >= 0.0) {
            return Err(schema(*line, "intensity must be non-negative".into()));
        }
    }
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}

pub fn write_intensity_csv<W: Write>(samples: &[IntensitySample], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in samples {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(())
}

/// Noiseless per-slot intensities of `profile` emitting `labels` cyclically.
pub fn synthesize_intensities(
    profile: &SourceProfile,
    labels: &[SlotLabel],
) -> Vec<IntensitySample> {
    let preds = cyclic_predecessors(labels);
    labels
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(slot, (l, p))| IntensitySample {
            slot,
            intensity: l.intensity,
            value: profile.mu_actual(l.intensity, Some(p.intensity)),
        })
        .collect()
}

pub fn intensity_stats(samples: &[IntensitySample]) -> Result<DecoyCorrelationStats> {
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let labels: Vec<Intensity> = samples.iter().map(|s| s.intensity).collect();
    decoy_correlation_stats(&values, &labels, &cyclic_predecessors(&labels))
}

/// Fringe visibilities of the interferometer versus arm-length mismatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityCurve {
    pub delays_mm: Vec<f64>,
    pub v_cw: Vec<f64>,
    pub v_pulsed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct VisibilityRow {
    delay_mm: f64,
    v_cw: f64,
    v_pulsed: f64,
}

impl VisibilityCurve {
    pub fn validate(&self) -> Result<()> {
        if self.delays_mm.len() != self.v_cw.len() || self.v_cw.len() != self.v_pulsed.len() {
            return Err(QkdError::InvalidParameter(
                "visibility columns differ in length".into(),
            ));
        }
        if self
            .v_cw
            .iter()
            .chain(&self.v_pulsed)
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(QkdError::InvalidParameter(
                "visibilities must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// CSV with header `delay_mm,v_cw,v_pulsed`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let rows: Vec<(usize, VisibilityRow)> = read_rows(r)?;
        let mut c = VisibilityCurve {
            delays_mm: vec![],
            v_cw: vec![],
            v_pulsed: vec![],
        };
        for (line, row) in rows {
            if !(0.0..=1.0).contains(&row.v_cw) || !(0.0..=1.0).contains(&row.v_pulsed) {
                return Err(schema(line, "visibilities must lie in [0, 1]".into()));
            }
            c.delays_mm.push(row.delay_mm);
            c.v_cw.push(row.v_cw);
            c.v_pulsed.push(row.v_pulsed);
        }
        Ok(c)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for i in 0..self.delays_mm.len() {
            wr.serialize(VisibilityRow {
                delay_mm: self.delays_mm[i],
                v_cw: self.v_cw[i],
                v_pulsed: self.v_pulsed[i],
            })?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Phase-coherence probability: the largest pulsed-to-CW visibility ratio.
pub fn estimate_pc(curve: &VisibilityCurve) -> Result<f64> {
    curve.validate()?;
    let best = curve
        .v_cw
        .iter()
        .zip(&curve.v_pulsed)
        .filter(|(cw, _)| **cw > 0.0)
        .map(|(cw, p)| p / cw)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        });
    best.map(|r| r.clamp(0.0, 1.0))
        .ok_or(QkdError::ZeroVisibility)
}

/// Visibility (I_max − I_min)/(I_max + I_min) of a fringe scan, with the
/// extrema taken from a least-squares fit of A + B·cos φ + C·sin φ.
pub fn fringe_visibility(phases_rad: &[f64], intensities: &[f64]) -> Result<f64> {
    if phases_rad.len() != intensities.len() || phases_rad.len() < 3 {
        return Err(QkdError::InvalidParameter(
            "need at least three matching fringe samples".into(),
        ));
    }
    let n = phases_rad.len();
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => phases_rad[i].cos(),
        _ => phases_rad[i].sin(),
    });
    let svd = a.svd(true, true);
    if !(svd.singular_values.min() > 1e-10 * svd.singular_values.max()) {
        return Err(QkdError::RankDeficient(
            "fringe phases do not resolve a sinusoid".into(),
        ));
    }
    let x = svd
        .solve(&DVector::from_column_slice(intensities), 1e-12)
        .map_err(|e| QkdError::RankDeficient(e.to_string()))?;
    if !(x[0] > 0.0) {
        return Err(QkdError::ZeroIntensity);
    }
    Ok((x[1].hypot(x[2]) / x[0]).clamp(0.0, 1.0))
}
