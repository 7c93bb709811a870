//! Whole-simulation configuration: one JSON file (comments allowed) with a
//! flat section per subsystem. Every field has a default, so `{}` is a valid
//! config.

use std::io::Read as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::BusConfig;
use crate::devices::{
    ArmConfig, CalibrationOffsets, CameraConfig, MapsConfig, NeedleConfig, SlipConfig, VesselConfig,
};
use crate::metrics::LumenModel;
use crate::oct::{ClassifierThresholds, EdgeScanParams};
use crate::synth::{EdgeTrialSpec, NoiseModel};
use crate::vision::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctConfig {
    pub thresholds: ClassifierThresholds,
    pub noise_model: NoiseModel,
    /// Noise level whose edge-scan success matches the ex vivo trials.
    pub calibrated_noise_level: f64,
    /// Noise level of the OCT signal during simulated procedures.
    pub procedure_noise_level: f64,
    pub scan: EdgeScanParams,
    /// Tissue extent from the scan start to the true edge, drawn uniformly.
    pub edge_distance_mm: (f64, f64),
    /// Share of scans whose edge is the nitinol holder rather than air.
    pub nitinol_fraction: f64,
    pub trial: EdgeTrialSpec,
}

impl Default for OctConfig {
    fn default() -> Self {
        Self {
            thresholds: ClassifierThresholds::default(),
            noise_model: NoiseModel::default(),
            calibrated_noise_level: 0.76,
            procedure_noise_level: 0.5,
            scan: EdgeScanParams::default(),
            edge_distance_mm: (1.5, 2.5),
            nitinol_fraction: 0.5,
            trial: EdgeTrialSpec::default(),
        }
    }
}

/// Physical offsets between OCT fiber and needle, and the noise of the
/// readings used to recover them at setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub true_offsets: CalibrationOffsets,
    pub reading_noise_sd_mm: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            true_offsets: CalibrationOffsets {
                x_offset_mm: 3.0,
                y_offset_mm: 0.5,
                z_offset_mm: 12.0,
            },
            reading_noise_sd_mm: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DevicesConfig {
    pub arm: ArmConfig,
    pub maps: MapsConfig,
    pub needle: NeedleConfig,
    pub slip: SlipConfig,
    pub vessel: VesselConfig,
    pub camera: CameraConfig,
    pub calibration: CalibrationConfig,
}

/// Logical durations of each workflow step, in milliseconds, before the
/// per-run speed factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub imaging_ms: u64,
    pub edge_scan_setup_ms: u64,
    pub edge_scan_per_position_ms: u64,
    pub move_ms: u64,
    pub drive_ms: u64,
    pub rotate_ms: u64,
    pub vision_ms: u64,
    pub pull_cut_ms: u64,
    pub tie_off_ms: u64,
    pub prompt_response_ms: u64,
    pub manual_jog_ms: u64,
    /// SD of the per-run multiplicative speed factor (mean 1).
    pub speed_factor_sd: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            imaging_ms: 5_000,
            edge_scan_setup_ms: 20_000,
            edge_scan_per_position_ms: 1_100,
            move_ms: 45_000,
            drive_ms: 20_000,
            rotate_ms: 10_000,
            vision_ms: 500,
            pull_cut_ms: 30_000,
            tie_off_ms: 80_000,
            prompt_response_ms: 15_000,
            manual_jog_ms: 45_000,
            speed_factor_sd: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum VisionMode {
    /// Verdicts drawn from ground truth with fixed error rates.
    Simulated { recall: f64, false_alarm_rate: f64 },
    /// Verdicts from a trained classifier on the rendered frames.
    Model { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub train: TrainConfig,
    pub dataset_pairs: usize,
    /// Success pairs per missed pair.
    pub imbalance_ratio: f64,
    pub mode: VisionMode,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset_pairs: 540,
            imbalance_ratio: 3.0,
            mode: VisionMode::Simulated {
                recall: 0.95,
                false_alarm_rate: 0.01,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub n_sutures: usize,
    pub rotation_increment_deg: f64,
    pub bite_depth_target_mm: f64,
    /// Vision-triggered retries allowed per suture side.
    pub retry_cap: u32,
    /// Manual jogs allowed per edge scan before the run is abandoned.
    pub jog_cap: u32,
    pub max_jog_mm: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            n_sutures: 8,
            rotation_increment_deg: 45.0,
            bite_depth_target_mm: 1.5,
            retry_cap: 3,
            jog_cap: 3,
            max_jog_mm: 2.0,
        }
    }
}

/// Behaviour of the scripted operator when no scenario entry applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub retry_probability: f64,
    pub default_jog_mm: (f64, f64, f64),
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            retry_probability: 1.0,
            default_jog_mm: (1.0, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub policy_path: Option<String>,
    pub oct: OctConfig,
    pub devices: DevicesConfig,
    pub timing: TimingConfig,
    pub vision: VisionConfig,
    pub bus: BusConfig,
    pub lumen: LumenModel,
    pub controller: ControllerConfig,
    pub operator: OperatorConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: None,
            policy_path: None,
            oct: OctConfig::default(),
            devices: DevicesConfig::default(),
            timing: TimingConfig::default(),
            vision: VisionConfig::default(),
            bus: BusConfig::default(),
            lumen: LumenModel::default(),
            controller: ControllerConfig::default(),
            operator: OperatorConfig::default(),
        }
    }
}

fn strip_comments(text: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    json_comments::StripComments::new(text.as_bytes())
        .read_to_string(&mut out)
        .map_err(|e| ConfigError::Invalid(format!("comment stripping failed: {e}")))?;
    Ok(out)
}

impl GlobalConfig {
    /// Parses JSON with `//` and `/* */` comments. Comment stripping keeps
    /// byte positions, so error lines refer to the original text.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let plain = strip_comments(text)?;
        let cfg: GlobalConfig = serde_json::from_str(&plain).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form; embedded in every report.
    pub fn hash(&self) -> String {
        crate::bus::hash_text(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.oct
            .thresholds
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("oct.thresholds: {e}")))?;
        self.oct
            .scan
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("oct.scan: {e}")))?;
        let (lo, hi) = self.oct.edge_distance_mm;
        if !(lo > 0.0 && lo <= hi && hi < self.oct.scan.max_travel_mm) {
            return bad(format!("oct.edge_distance_mm ({lo}, {hi}) must satisfy 0 < lo <= hi < max_travel"));
        }
        if !(0.0..=1.0).contains(&self.oct.nitinol_fraction) {
            return bad("oct.nitinol_fraction must be in [0,1]".into());
        }
        for (name, v) in [
            ("oct.calibrated_noise_level", self.oct.calibrated_noise_level),
            ("oct.procedure_noise_level", self.oct.procedure_noise_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        self.devices
            .needle
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("devices.needle: {e}")))?;
        if self.devices.vessel.n_sites != self.controller.n_sutures {
            return bad(format!(
                "devices.vessel.n_sites ({}) must equal controller.n_sutures ({})",
                self.devices.vessel.n_sites, self.controller.n_sutures
            ));
        }
        let c = &self.controller;
        if c.n_sutures < 2 {
            return bad("controller.n_sutures must be >= 2".into());
        }
        if (c.rotation_increment_deg / 45.0).fract().abs() > 1e-9 || c.rotation_increment_deg <= 0.0 {
            return bad("controller.rotation_increment_deg must be a positive multiple of 45".into());
        }
        if !(c.bite_depth_target_mm >= 0.0 && c.max_jog_mm > 0.0) {
            return bad("controller bite target must be >= 0 and max_jog_mm > 0".into());
        }
        if !(0.0..=1.0).contains(&self.operator.retry_probability) {
            return bad("operator.retry_probability must be in [0,1]".into());
        }
        let (dx, dy, dz) = self.operator.default_jog_mm;
        if (dx * dx + dy * dy + dz * dz).sqrt() > c.max_jog_mm {
            return bad("operator.default_jog_mm exceeds controller.max_jog_mm".into());
        }
        if let VisionMode::Simulated {
            recall,
            false_alarm_rate,
        } = self.vision.mode
        {
            if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&false_alarm_rate) {
                return bad("vision.mode recall and false_alarm_rate must be in [0,1]".into());
            }
        }
        if !(self.timing.speed_factor_sd >= 0.0 && self.timing.speed_factor_sd < 0.5) {
            return bad("timing.speed_factor_sd must be in [0, 0.5)".into());
        }
        self.lumen.validate().map_err(|e| ConfigError::Invalid(format!("lumen: {e}")))?;
        Ok(())
    }
}
