//! The engine configuration file (TOML).
//!
//! Unknown keys are rejected, relative paths are resolved against the
//! directory of the file, and the whole config is validated before any
//! work starts. `config.schema.json` next to this crate's manifest
//! describes the same format.

use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use phonewatch_core::detect::{
    ClassLabel, DetectorSpec, LabelRegistry, ScriptCoords, ScriptedBackend, LIVE_SCORE_THRESHOLD,
};
use phonewatch_core::geometry::{DriverSide, FrameSize};
use phonewatch_core::track::{Tracker, TrackerConfig};
use serde::{Deserialize, Serialize};

use crate::backend::{FrameBackend, Throttled};
use crate::frames::TimestampPolicy;
use crate::pipeline::{CropConfig, Pipeline, PipelineError, PipelineMode};
use crate::script::{load_script, ScriptError};
use crate::store::{valid_stream_id, SnapshotPolicy};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("detection script {path}: {source}")]
    Script { path: PathBuf, source: ScriptError },
}

impl From<PipelineError> for ConfigError {
    fn from(e: PipelineError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

fn default_stream_id() -> String {
    "cam-01".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_stream_id")]
    pub stream_id: String,
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub detectors: Detectors,
    #[serde(default)]
    pub store: StoreSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub source: SourceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: PipelineMode,
    #[serde(default)]
    pub driver_side: DriverSide,
    #[serde(default = "default_fraction")]
    pub driver_fraction: f64,
    #[serde(default)]
    pub crop_padding: f64,
    #[serde(default)]
    pub min_crop_pixels: u64,
}

fn default_fraction() -> f64 {
    0.5
}

impl PipelineSection {
    pub fn crop(&self) -> CropConfig {
        CropConfig {
            driver_side: self.driver_side,
            driver_fraction: self.driver_fraction,
            crop_padding: self.crop_padding,
            min_crop_pixels: self.min_crop_pixels,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detectors {
    /// Phone + licence-plate detector for single-step mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single: Option<DetectorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub windscreen: Option<DetectorConfig>,
    /// Step-2 phone detector for two-step mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phone: Option<DetectorConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Replays a detection script.
    #[default]
    Scripted,
}

fn live_threshold() -> f64 {
    LIVE_SCORE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub script: PathBuf,
    pub input_size: FrameSize,
    pub classes: Vec<String>,
    #[serde(default = "live_threshold")]
    pub score_threshold: f64,
    #[serde(default)]
    pub coords: ScriptCoords,
    /// Busy-wait added to every inference, to stand in for model latency.
    #[serde(default)]
    pub simulated_latency_us: u64,
}

impl DetectorConfig {
    fn labels(&self) -> Result<BTreeSet<ClassLabel>, ConfigError> {
        let registry = LabelRegistry::default();
        self.classes
            .iter()
            .map(|c| {
                registry
                    .lookup(c)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown class `{c}`")))
            })
            .collect()
    }

    fn validate(&self, role: &str, needs: &[&str]) -> Result<(), ConfigError> {
        let labels = self
            .labels()
            .map_err(|e| ConfigError::Invalid(format!("detectors.{role}: {e}")))?;
        for n in needs {
            if !labels.iter().any(|l| l.is(n)) {
                return Err(ConfigError::Invalid(format!(
                    "detectors.{role} must list class `{n}`"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(ConfigError::Invalid(format!(
                "detectors.{role}.score_threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        Ok(())
    }

    pub fn build(&self, role: &str) -> Result<FrameBackend, ConfigError> {
        let entries = load_script(&self.script, &LabelRegistry::default()).map_err(|source| {
            ConfigError::Script {
                path: self.script.clone(),
                source,
            }
        })?;
        let spec = DetectorSpec {
            name: self
                .name
                .clone()
                .unwrap_or_else(|| format!("scripted-{role}")),
            input_size: self.input_size,
            classes: self.labels()?,
            score_threshold: self.score_threshold,
        };
        let backend = ScriptedBackend::new(spec, self.coords, entries);
        Ok(if self.simulated_latency_us > 0 {
            Box::new(Throttled::new(
                backend,
                Duration::from_micros(self.simulated_latency_us),
            ))
        } else {
            Box::new(backend)
        })
    }
}

fn default_store_dir() -> PathBuf {
    PathBuf::from("store")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    #[serde(default = "default_store_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub snapshot_policy: SnapshotPolicy,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            dir: default_store_dir(),
            snapshot_policy: SnapshotPolicy::default(),
        }
    }
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Static bearer token; no token disables auth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Origins allowed by CORS; `"*"` allows any.
    #[serde(default)]
    pub cors_allow: Vec<String>,
    /// Frame directory to run through the pipeline while serving.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attach_input: Option<PathBuf>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            token: None,
            cors_allow: Vec::new(),
            attach_input: None,
        }
    }
}

impl ServerSection {
    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        let addr: SocketAddr = self
            .bind
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("server.bind `{}`: {e}", self.bind)))?;
        if addr.port() == 0 {
            return Err(ConfigError::Invalid(
                "server.bind port must be in 1..=65535".into(),
            ));
        }
        Ok(addr)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    #[serde(default)]
    pub timestamps: TimestampPolicy,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl EngineConfig {
    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut config: EngineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        for d in [
            &mut config.detectors.single,
            &mut config.detectors.windscreen,
            &mut config.detectors.phone,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, &mut d.script);
        }
        resolve(base, &mut config.store.dir);
        if let Some(p) = config.server.attach_input.as_mut() {
            resolve(base, p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_toml(&text, &base, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !valid_stream_id(&self.stream_id) {
            return Err(ConfigError::Invalid(format!(
                "stream_id `{}`: use letters, digits, '.', '_' or '-'",
                self.stream_id
            )));
        }
        self.tracker
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline
            .crop()
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.server.bind_addr()?;
        if let TimestampPolicy::Nominal { fps, .. } = self.source.timestamps {
            if !(fps.is_finite() && fps > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "source.timestamps.fps {fps} must be positive"
                )));
            }
        }
        for (role, d) in [
            ("single", &self.detectors.single),
            ("windscreen", &self.detectors.windscreen),
            ("phone", &self.detectors.phone),
        ] {
            if let Some(d) = d {
                d.validate(role, &[])?;
            }
        }
        self.validate_mode(self.pipeline.mode)
    }

    /// Checks the detectors needed by `mode` are configured.
    pub fn validate_mode(&self, mode: PipelineMode) -> Result<(), ConfigError> {
        let missing = |role: &str| {
            ConfigError::Invalid(format!("mode {mode:?} needs a [detectors.{role}] section"))
        };
        match mode {
            PipelineMode::SingleStep => {
                let d = self
                    .detectors
                    .single
                    .as_ref()
                    .ok_or_else(|| missing("single"))?;
                d.validate("single", &[ClassLabel::PHONE, ClassLabel::LICENCE_PLATE])
            }
            PipelineMode::TwoStep => {
                let w = self
                    .detectors
                    .windscreen
                    .as_ref()
                    .ok_or_else(|| missing("windscreen"))?;
                w.validate("windscreen", &[ClassLabel::WINDSCREEN])?;
                let p = self
                    .detectors
                    .phone
                    .as_ref()
                    .ok_or_else(|| missing("phone"))?;
                p.validate("phone", &[ClassLabel::PHONE])
            }
        }
    }

    /// Builds the pipeline for `mode`, with or without a tracker.
    pub fn build_pipeline(
        &self,
        mode: PipelineMode,
        tracking: bool,
    ) -> Result<Pipeline, ConfigError> {
        self.validate_mode(mode)?;
        let tracker = if tracking {
            Some(Tracker::new(self.tracker).map_err(|e| ConfigError::Invalid(e.to_string()))?)
        } else {
            None
        };
        let d = &self.detectors;
        Ok(match mode {
            PipelineMode::SingleStep => Pipeline::single_step(
                d.single.as_ref().expect("validated").build("single")?,
                tracker,
            )?,
            PipelineMode::TwoStep => Pipeline::two_step(
                d.windscreen
                    .as_ref()
                    .expect("validated")
                    .build("windscreen")?,
                d.phone.as_ref().expect("validated").build("phone")?,
                self.pipeline.crop(),
                tracker,
            )?,
        })
    }
}
