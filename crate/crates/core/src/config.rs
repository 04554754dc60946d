//! Pipeline configuration as a flat `section.key = value` file.
//!
//! The format is a subset of TOML (dotted keys), so it is parsed with the
//! `toml` crate. Unknown keys are rejected. [`PipelineConfig::to_flat_text`]
//! writes the canonical form used for hashing: one line per key, sorted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectorKind, DetectorParams};
use crate::estimate::QuadrotorParams;
use crate::events::StcFilterParams;
use crate::geometry::{CameraIntrinsics, Extrinsics};
use crate::rpm::RpmParams;
use crate::sim::GeneratorConfig;
use crate::track::TrackerParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Noise parameters of the coupled filters.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    /// Position process noise rate, m²/s.
    pub q_pos: f64,
    /// Velocity process noise rate, (m/s)²/s.
    pub q_vel: f64,
    /// Lateral (image-plane) position noise, m.
    pub sigma_lat: f64,
    /// Depth-axis position noise, m.
    pub sigma_depth: f64,
    /// Velocity variance at initialisation, (m/s)².
    pub init_vel_var: f64,
    /// Thrust-axis variance at start, level prior.
    pub init_ori_var: f64,
    /// Thrust-axis process noise rate, 1/s.
    pub q_ori: f64,
    /// Disc-normal measurement noise.
    pub sigma_m: f64,
    /// χ² gate on the innovations (3 dof).
    pub gate_chi2: f64,
    /// Propeller disc radius used to scale the disc pose, m.
    pub disc_radius: f64,
    /// Smallest usable centroid span for depth, px.
    pub min_span_px: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            q_pos: 1e-4,
            q_vel: 0.5,
            sigma_lat: 0.02,
            sigma_depth: 0.15,
            init_vel_var: 0.25,
            init_ori_var: 0.01,
            q_ori: 0.005,
            sigma_m: 0.3,
            gate_chi2: crate::estimate::CHI2_99_3DOF,
            disc_radius: 0.0635,
            min_span_px: 5.0,
        }
    }
}

/// Optional limits checked by the metrics command.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Per-prop MAPE, percent.
    pub mape_max: Option<f64>,
    pub position_rmse_lateral_max: Option<f64>,
    pub position_rmse_depth_max: Option<f64>,
    pub velocity_rmse_max: Option<f64>,
    pub roll_rmse_deg_max: Option<f64>,
    pub pitch_rmse_deg_max: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExtrinsicsConfig {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Default for ExtrinsicsConfig {
    fn default() -> Self {
        let e = Extrinsics::default();
        Self {
            rotation: e.rows(),
            translation: e.translation.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    seed: u64,
    chunk_us: u64,
    n_blades: u32,
    detector: DetectorKind,
    stc: StcFilterParams,
    detect: DetectorParams,
    track: TrackerParams,
    rpm: RpmParams,
    camera: CameraIntrinsics,
    extrinsics: ExtrinsicsConfig,
    quad: QuadrotorParams,
    filter: FilterParams,
    sim: GeneratorConfig,
    thresholds: Thresholds,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self::from(&PipelineConfig::default())
    }
}

/// Every tunable of simulation, estimation and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Single source of randomness.
    pub seed: u64,
    pub chunk_us: u64,
    pub n_blades: u32,
    pub detector: DetectorKind,
    pub stc: StcFilterParams,
    pub detect: DetectorParams,
    pub track: TrackerParams,
    pub rpm: RpmParams,
    pub camera: CameraIntrinsics,
    pub extrinsics: Extrinsics,
    pub quad: QuadrotorParams,
    pub filter: FilterParams,
    pub sim: GeneratorConfig,
    pub thresholds: Thresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            chunk_us: 10_000,
            n_blades: 2,
            detector: DetectorKind::Cc,
            stc: StcFilterParams::default(),
            detect: DetectorParams::default(),
            track: TrackerParams::default(),
            rpm: RpmParams::default(),
            camera: CameraIntrinsics::default(),
            extrinsics: Extrinsics::default(),
            quad: QuadrotorParams::default(),
            filter: FilterParams::default(),
            sim: GeneratorConfig::default(),
            thresholds: Thresholds::default(),
        };
        c.sync_shared();
        c
    }
}

impl From<&PipelineConfig> for RawConfig {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            seed: c.seed,
            chunk_us: c.chunk_us,
            n_blades: c.n_blades,
            detector: c.detector,
            stc: c.stc,
            detect: c.detect,
            track: c.track,
            rpm: c.rpm,
            camera: c.camera,
            extrinsics: ExtrinsicsConfig {
                rotation: c.extrinsics.rows(),
                translation: c.extrinsics.translation.into(),
            },
            quad: c.quad.clone(),
            filter: c.filter,
            sim: c.sim.clone(),
            thresholds: c.thresholds,
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

impl PipelineConfig {
    /// Copies the seed and blade count into the sections that use them.
    pub fn sync_shared(&mut self) {
        self.detect.seed = self.seed;
        self.sim.seed = self.seed;
        self.rpm.n_blades = self.n_blades;
        self.sim.n_blades = self.n_blades;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_shared();
        self
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let extrinsics = Extrinsics::from_rows(raw.extrinsics.rotation, raw.extrinsics.translation).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut c = Self {
            seed: raw.seed,
            chunk_us: raw.chunk_us,
            n_blades: raw.n_blades,
            detector: raw.detector,
            stc: raw.stc,
            detect: raw.detect,
            track: raw.track,
            rpm: raw.rpm,
            camera: raw.camera,
            extrinsics,
            quad: raw.quad,
            filter: raw.filter,
            sim: raw.sim,
            thresholds: raw.thresholds,
        };
        c.sync_shared();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.chunk_us == 0 {
            return Err(ConfigError::Invalid("chunk_us must be positive".into()));
        }
        if self.n_blades == 0 {
            return Err(ConfigError::Invalid("n_blades must be positive".into()));
        }
        self.stc.validate().map_err(|e| inv(&e))?;
        self.detect.validate().map_err(|e| inv(&e))?;
        self.rpm.validate().map_err(|e| inv(&e))?;
        self.camera.validate().map_err(|e| inv(&e))?;
        self.quad.validate().map_err(|e| inv(&e))?;
        self.sim.validate().map_err(|e| inv(&e))?;
        let f = &self.filter;
        let positive = [f.sigma_lat, f.sigma_depth, f.sigma_m, f.gate_chi2, f.disc_radius, f.init_vel_var, f.init_ori_var];
        if positive.iter().any(|v| !(*v > 0.0)) || [f.q_pos, f.q_vel, f.q_ori, f.min_span_px].iter().any(|v| !(*v >= 0.0)) {
            return Err(ConfigError::Invalid("filter noise parameters must be positive".into()));
        }
        Ok(())
    }

    /// Canonical flat text: sorted `key = value` lines.
    pub fn to_flat_text(&self) -> String {
        let value = toml::Value::try_from(RawConfig::from(self)).expect("config serialises");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let c = PipelineConfig::default();
        let text = c.to_flat_text();
        assert!(text.contains("rpm.window_us = 100000\n"));
        assert!(text.contains("detector = \"cc\"\n"));
        assert!(text.lines().all(|l| l.contains(" = ")));
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn dotted_keys_override() {
        let c = PipelineConfig::parse("seed = 9\nrpm.window_us = 50000\ndetector = \"cluster\"\nthresholds.mape_max = 3.0\n").unwrap();
        assert_eq!(c.rpm.window_us, 50_000);
        assert_eq!(c.detector, DetectorKind::Cluster);
        assert_eq!((c.detect.seed, c.sim.seed), (9, 9));
        assert_eq!(c.thresholds.mape_max, Some(3.0));
        assert_eq!(c.rpm.bin_us, 200);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(PipelineConfig::parse("rpm.windw_us = 5"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::parse("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::parse("chunk_us = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            PipelineConfig::parse("extrinsics.rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
