//! TOML run configuration shared by every command.
//!
//! Units: angles in degrees, lengths in km, losses in dB, rates in Hz, times
//! in seconds, intensities in mean photons per pulse.

use serde::{Deserialize, Serialize};

use crate::channel::LinkModel;
use crate::distill::SecurityParams;
use crate::error::{QkdError, Result};
use crate::labels::{Intensity, PerIntensity, PerState, StateLabel};
use crate::optimize::OptimizerSettings;
use crate::protocol::{SimulationMode, PA_BLOCK_BITS};
use crate::source::SourceProfile;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default)]
    pub security: SecurityParams,
    #[serde(default)]
    pub distillation: DistillationConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

/// Transmitter section. Correlations are given either as per-state maxima
/// (`max_delta_deg`, expanded to +max after |0⟩, −max after |1⟩, 0 after |+⟩)
/// or as a full `delta_deg[j][k]` matrix; intensities either as a relative
/// `intensity_correlation` (−c after signal, +c after decoy) or as a full
/// `mu_conditional[a][b]` matrix. State order is (0, 1, +); intensity order
/// is (signal, decoy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub theta_deg: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_delta_deg: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_deg: Option<[[f64; 3]; 3]>,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub p_signal: f64,
    pub p_z: f64,
    pub intensity_correlation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_conditional: Option<[[f64; 2]; 2]>,
    pub phase_coherence: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            theta_deg: [8.0, 165.6, 90.0],
            max_delta_deg: None,
            delta_deg: None,
            mu_signal: 0.3,
            mu_decoy: 0.15,
            p_signal: 0.6,
            p_z: 0.9,
            intensity_correlation: 0.03,
            mu_conditional: None,
            phase_coherence: 0.0019,
        }
    }
}

impl SourceConfig {
    pub fn to_profile(&self) -> Result<SourceProfile> {
        if self.max_delta_deg.is_some() && self.delta_deg.is_some() {
            return Err(QkdError::Config(
                "give either source.max_delta_deg or source.delta_deg, not both".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.intensity_correlation.abs()) {
            return Err(QkdError::Config(
                "source.intensity_correlation must lie in (-1, 1)".into(),
            ));
        }
        let mut p = SourceProfile::ideal(self.mu_signal, self.mu_decoy, self.p_signal, self.p_z);
        p.theta_deg = PerState::new(self.theta_deg[0], self.theta_deg[1], self.theta_deg[2]);
        let idx = |j: StateLabel| j.index();
        if let Some(d) = self.delta_deg {
            p.delta_deg = PerState::from_fn(|j| PerState::from_fn(|k| d[idx(j)][idx(k)]));
        } else {
            let m = self.max_delta_deg.unwrap_or([6.3, 6.9, 8.0]);
            p.delta_deg = PerState::from_fn(|j| PerState::new(m[idx(j)], -m[idx(j)], 0.0));
        }
        if let Some(mc) = self.mu_conditional {
            p.mu_conditional =
                PerIntensity::from_fn(|a| PerIntensity::from_fn(|b| mc[a.index()][b.index()]));
        } else {
            let c = self.intensity_correlation;
            p.mu_conditional = PerIntensity::from_fn(|a: Intensity| {
                PerIntensity::new(p.mu[a] * (1.0 - c), p.mu[a] * (1.0 + c))
            });
        }
        p.phase_coherence = self.phase_coherence;
        p.validate()
            .map_err(|e| QkdError::Config(format!("[source] {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    /// Phase-coherence discount; defaults to `source.phase_coherence`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_c_star: Option<f64>,
    /// Sifted bits per privacy-amplification block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_bits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub pulses: u64,
    pub seed: u64,
    pub mode: SimulationMode,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            pulses: 10_000_000,
            seed: 1,
            mode: SimulationMode::Mc,
        }
    }
}

/// Everything a pipeline needs, validated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub profile: SourceProfile,
    pub link: LinkModel,
    pub security: SecurityParams,
    pub p_c_star: f64,
    pub block_bits: u64,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Config> {
        let c: Config = toml::from_str(s)
            .map_err(|e| QkdError::Config(e.to_string().trim_end().to_string()))?;
        if c.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(QkdError::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QkdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_toml_str(&text).map_err(|e| match e {
            QkdError::Config(m) => QkdError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QkdError::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let profile = self.source.to_profile()?;
        self.link
            .validate()
            .map_err(|e| QkdError::Config(format!("[link] {e}")))?;
        self.security
            .validate()
            .map_err(|e| QkdError::Config(format!("[security] {e}")))?;
        let p_c_star = self
            .distillation
            .p_c_star
            .unwrap_or(profile.phase_coherence);
        if !(0.0..=1.0).contains(&p_c_star) {
            return Err(QkdError::Config(format!(
                "distillation.p_c_star {p_c_star} outside [0, 1]"
            )));
        }
        let block_bits = self.distillation.block_bits.unwrap_or(PA_BLOCK_BITS);
        if block_bits == 0 {
            return Err(QkdError::Config(
                "distillation.block_bits must be positive".into(),
            ));
        }
        if self.simulation.pulses == 0 {
            return Err(QkdError::Config(
                "simulation.pulses must be positive".into(),
            ));
        }
        self.optimizer
            .validate()
            .map_err(|e| QkdError::Config(format!("[optimizer] {e}")))?;
        Ok(Resolved {
            profile,
            link: self.link.clone(),
            security: self.security,
            p_c_star,
            block_bits,
        })
    }
}
