//! Protocol-parameter search maximizing the analytic secret-key rate: a
//! coarse grid followed by coordinate-wise golden-section refinement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::LinkModel;
use crate::distill::{distill, SecurityParams};
use crate::error::{QkdError, Result};
use crate::protocol::expected_tallies;
use crate::source::SourceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub p_signal: f64,
    pub p_z: f64,
}

impl ProtocolParams {
    pub const REFERENCE: ProtocolParams = ProtocolParams {
        mu_signal: 0.3,
        mu_decoy: 0.15,
        p_signal: 0.6,
        p_z: 0.9,
    };

    fn get(&self, i: usize) -> f64 {
        [self.mu_signal, self.mu_decoy, self.p_signal, self.p_z][i]
    }

    fn with(mut self, i: usize, v: f64) -> Self {
        match i {
            0 => self.mu_signal = v,
            1 => self.mu_decoy = v,
            2 => self.p_signal = v,
            _ => self.p_z = v,
        }
        self
    }
}

/// Search box and resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub mu_signal: [f64; 2],
    pub mu_decoy: [f64; 2],
    pub p_signal: [f64; 2],
    pub p_z: [f64; 2],
    pub mu_step: f64,
    pub p_step: f64,
    /// Coordinate sweeps of golden-section refinement after the grid.
    pub refine_sweeps: u32,
    pub golden_iterations: u32,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            mu_signal: [0.1, 0.8],
            mu_decoy: [0.02, 0.4],
            p_signal: [0.3, 0.9],
            p_z: [0.5, 0.95],
            mu_step: 0.01,
            p_step: 0.05,
            refine_sweeps: 2,
            golden_iterations: 20,
        }
    }
}

fn axis(range: [f64; 2], step: f64) -> Vec<f64> {
    let n = ((range[1] - range[0]) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| range[0] + i as f64 * step)
        .map(|v| (v * 1e9).round() / 1e9)
        .collect()
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let empty = |m: String| Err(QkdError::EmptyFeasibleRegion(m));
        for (name, r) in [("mu_signal", self.mu_signal), ("mu_decoy", self.mu_decoy)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return empty(format!("{name} range {r:?} must satisfy 0 < min ≤ max ≤ 1"));
            }
        }
        for (name, r) in [("p_signal", self.p_signal), ("p_z", self.p_z)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0) {
                return empty(format!("{name} range {r:?} must lie inside (0, 1)"));
            }
        }
        if self.mu_decoy[0] >= self.mu_signal[1] {
            return empty(format!(
                "decoy range {:?} never lies below signal range {:?}",
                self.mu_decoy, self.mu_signal
            ));
        }
        if !(self.mu_step > 0.0 && self.p_step > 0.0) {
            return Err(QkdError::InvalidParameter(
                "grid steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Grid points with μ_decoy < μ_signal.
    pub fn grid(&self) -> Vec<ProtocolParams> {
        let (m0, m1) = (
            axis(self.mu_signal, self.mu_step),
            axis(self.mu_decoy, self.mu_step),
        );
        let (ps, pz) = (
            axis(self.p_signal, self.p_step),
            axis(self.p_z, self.p_step),
        );
        let mut out = Vec::new();
        for &mu_signal in &m0 {
            for &mu_decoy in m1.iter().filter(|&&d| d < mu_signal) {
                for &p_signal in &ps {
                    for &p_z in &pz {
                        out.push(ProtocolParams {
                            mu_signal,
                            mu_decoy,
                            p_signal,
                            p_z,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Grid,
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub stage: Stage,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub p_signal: f64,
    pub p_z: f64,
    pub skr_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub best: ProtocolParams,
    pub best_skr_bps: f64,
    /// False when no evaluated point yields a positive key.
    pub positive_key: bool,
    pub grid_size: usize,
    pub trace: Vec<TracePoint>,
}

/// Everything the objective holds fixed.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub imperfections: &'a SourceProfile,
    pub model: &'a LinkModel,
    pub security: &'a SecurityParams,
    pub block_bits: f64,
    pub p_c_star: f64,
}

impl Objective<'_> {
    /// Expected SKR (bit/s) of one privacy-amplification block at `x`.
    pub fn skr(&self, x: &ProtocolParams) -> f64 {
        let profile = self
            .imperfections
            .with_protocol(x.mu_signal, x.mu_decoy, x.p_signal, x.p_z);
        if profile.validate().is_err() {
            return 0.0;
        }
        let per_pulse = expected_tallies(&profile, self.model, 1.0);
        let nz = per_pulse.n_z();
        if !(nz > 0.0) {
            return 0.0;
        }
        let t = per_pulse.scaled(self.block_bits / nz);
        distill(&t, &profile, self.model, self.security, self.p_c_star).map_or(0.0, |r| r.skr_bps)
    }
}

const INV_PHI: f64 = 0.618_033_988_749_895;

/// Grid scan (parallel) then, unless `grid_only`, golden-section sweeps.
pub fn optimize(
    objective: &Objective<'_>,
    settings: &OptimizerSettings,
    grid_only: bool,
) -> Result<OptimizeResult> {
    settings.validate()?;
    objective.model.validate()?;
    let grid = settings.grid();
    if grid.is_empty() {
        return Err(QkdError::EmptyFeasibleRegion(
            "grid contains no point with decoy < signal".into(),
        ));
    }
    let mut trace: Vec<TracePoint> = grid
        .par_iter()
        .map(|x| point(Stage::Grid, x, objective.skr(x)))
        .collect();
    let grid_size = trace.len();

    if !grid_only {
        let start = best_of(&trace);
        let mut x = ProtocolParams {
            mu_signal: start.mu_signal,
            mu_decoy: start.mu_decoy,
            p_signal: start.p_signal,
            p_z: start.p_z,
        };
        let mut fx = start.skr_bps;
        if fx > 0.0 {
            for _ in 0..settings.refine_sweeps {
                for i in 0..4 {
                    let (lo, hi) = coordinate_bounds(settings, &x, i);
                    if hi - lo < 1e-9 {
                        continue;
                    }
                    let (xi, fi) = golden(lo, hi, settings.golden_iterations, |v| {
                        let p = x.with(i, v);
                        let f = objective.skr(&p);
                        trace.push(point(Stage::Refine, &p, f));
                        f
                    });
                    if fi > fx {
                        x = x.with(i, xi);
                        fx = fi;
                    }
                }
            }
        }
    }
    let best = best_of(&trace);
    Ok(OptimizeResult {
        best: ProtocolParams {
            mu_signal: best.mu_signal,
            mu_decoy: best.mu_decoy,
            p_signal: best.p_signal,
            p_z: best.p_z,
        },
        best_skr_bps: best.skr_bps,
        positive_key: best.skr_bps > 0.0,
        grid_size,
        trace,
    })
}

fn point(stage: Stage, x: &ProtocolParams, skr_bps: f64) -> TracePoint {
    TracePoint {
        stage,
        mu_signal: x.mu_signal,
        mu_decoy: x.mu_decoy,
        p_signal: x.p_signal,
        p_z: x.p_z,
        skr_bps,
    }
}

fn best_of(trace: &[TracePoint]) -> TracePoint {
    // First maximum wins so ties resolve deterministically.
    *trace
        .iter()
        .fold(None, |acc: Option<&TracePoint>, p| match acc {
            Some(a) if a.skr_bps >= p.skr_bps => Some(a),
            _ => Some(p),
        })
        .expect("non-empty trace")
}

/// Bounds of coordinate `i` keeping μ_decoy strictly below μ_signal.
fn coordinate_bounds(s: &OptimizerSettings, x: &ProtocolParams, i: usize) -> (f64, f64) {
    let gap = 1e-3;
    match i {
        0 => (s.mu_signal[0].max(x.mu_decoy + gap), s.mu_signal[1]),
        1 => (s.mu_decoy[0], s.mu_decoy[1].min(x.mu_signal - gap)),
        2 => (s.p_signal[0], s.p_signal[1]),
        _ => (s.p_z[0], s.p_z[1]),
    }
    .into_bounds(x.get(i))
}

trait IntoBounds {
    fn into_bounds(self, current: f64) -> (f64, f64);
}

impl IntoBounds for (f64, f64) {
    /// Empty intervals collapse onto the current value.
    fn into_bounds(self, current: f64) -> (f64, f64) {
        if self.0 <= self.1 {
            self
        } else {
            (current, current)
        }
    }
}

/// Golden-section maximization on [lo, hi]; returns the best point evaluated.
fn golden(mut lo: f64, mut hi: f64, iters: u32, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = if fc >= fd { (c, fc) } else { (d, fd) };
    for _ in 0..iters {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
            if fc > best.1 {
                best = (c, fc);
            }
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
            if fd > best.1 {
                best = (d, fd);
            }
        }
    }
    best
}
