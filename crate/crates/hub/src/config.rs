//! Hub configuration file (JSON).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thalamus_core::ingest::{self, CsvMapping, RecordedStream, ReplayPlan};
use thalamus_core::{validate_descriptor, SignalDescriptor};
use thiserror::Error;

pub const DEFAULT_LISTEN: &str = "0.0.0.0:7331";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Clients whose hello id ends in `#<admin_token>` may send control
    /// frames. Empty disables admin access.
    #[serde(default)]
    pub admin_token: String,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub limits: Limits,
    /// Base seed for noise stages that do not set their own.
    #[serde(default)]
    pub seed: u64,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig {
            listen: default_listen(),
            admin_token: String::new(),
            devices: Vec::new(),
            limits: Limits::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub descriptor: SignalDescriptor,
    pub source: SourceConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum SourceConfig {
    Csv { path: PathBuf, mapping: CsvMapping },
    Json { path: PathBuf },
}

impl SourceConfig {
    pub fn path(&self) -> &Path {
        match self {
            SourceConfig::Csv { path, .. } | SourceConfig::Json { path } => path,
        }
    }

    fn path_mut(&mut self) -> &mut PathBuf {
        match self {
            SourceConfig::Csv { path, .. } | SourceConfig::Json { path } => path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    #[serde(default = "one")]
    pub speed: f64,
    #[serde(default = "yes")]
    pub rebase: bool,
    #[serde(default, rename = "loop")]
    pub looped: bool,
    /// Wait this long after start before the first sample is due.
    #[serde(default)]
    pub start_delay_ms: u64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            speed: 1.0,
            rebase: true,
            looped: false,
            start_delay_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_max_frame_bytes")]
    pub max_frame_bytes: usize,
    #[serde(default = "default_history_seconds")]
    pub history_seconds: u64,
    /// Connections without a subscription are closed after this much silence.
    #[serde(default = "default_idle_timeout_seconds")]
    pub idle_timeout_seconds: u64,
}

fn default_queue_capacity() -> usize {
    1024
}
fn default_max_frame_bytes() -> usize {
    thalamus_core::wire::DEFAULT_MAX_FRAME_BYTES
}
fn default_history_seconds() -> u64 {
    60
}
fn default_idle_timeout_seconds() -> u64 {
    30
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            queue_capacity: default_queue_capacity(),
            max_frame_bytes: default_max_frame_bytes(),
            history_seconds: default_history_seconds(),
            idle_timeout_seconds: default_idle_timeout_seconds(),
        }
    }
}

impl HubConfig {
    /// Parses JSON text. Relative dataset paths are left as written.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde reports unknown or missing fields as "... field `name` ...".
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            ConfigError::new(field, msg)
        })
    }

    /// Reads, parses and validates a config file. Relative dataset paths are
    /// resolved against the directory holding the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.devices {
            let p = d.source.path_mut();
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.listen.parse::<std::net::SocketAddr>().is_err() && !self.listen.contains(':') {
            return Err(ConfigError::new("listen", format!("expected host:port, got {:?}", self.listen)));
        }
        let l = &self.limits;
        if l.queue_capacity == 0 {
            return Err(ConfigError::new("limits.queue_capacity", "must be >= 1"));
        }
        if l.max_frame_bytes < 64 {
            return Err(ConfigError::new("limits.max_frame_bytes", "must be >= 64"));
        }
        if l.idle_timeout_seconds == 0 {
            return Err(ConfigError::new("limits.idle_timeout_seconds", "must be >= 1"));
        }
        let mut seen = BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            let at = |f: &str| format!("devices[{i}].{f}");
            validate_descriptor(&d.descriptor)
                .map_err(|e| ConfigError::new(at(&format!("descriptor.{}", e.field)), e.reason))?;
            if !seen.insert(d.descriptor.key()) {
                return Err(ConfigError::new(
                    at("descriptor"),
                    format!("duplicate signal {}", d.descriptor.key()),
                ));
            }
            if !(d.replay.speed.is_finite() && d.replay.speed > 0.0) {
                return Err(ConfigError::new(at("replay.speed"), "must be > 0"));
            }
            if let SourceConfig::Csv { mapping, .. } = &d.source {
                if mapping.value_columns.len() != d.descriptor.channels as usize {
                    return Err(ConfigError::new(
                        at("source.mapping.value_columns"),
                        format!(
                            "{} columns for {} channels",
                            mapping.value_columns.len(),
                            d.descriptor.channels
                        ),
                    ));
                }
            }
            let path = d.source.path();
            if !path.is_file() {
                return Err(ConfigError::new(
                    at("source.path"),
                    format!("file not found: {}", path.display()),
                ));
            }
        }
        Ok(())
    }

    /// Loads every configured dataset into a replay plan, in config order.
    pub fn load_plans(&self) -> Result<Vec<(ReplayPlan, u64)>, ConfigError> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let stream = load_source(d).map_err(|e| {
                    ConfigError::new(
                        format!("devices[{i}].source.path"),
                        format!("{}: {e}", d.source.path().display()),
                    )
                })?;
                let plan = ReplayPlan::new(vec![stream], d.replay.speed, d.replay.rebase, d.replay.looped)
                    .map_err(|e| ConfigError::new(format!("devices[{i}].replay.speed"), e.to_string()))?;
                Ok((plan, d.replay.start_delay_ms))
            })
            .collect()
    }
}

fn load_source(d: &DeviceConfig) -> Result<RecordedStream, ingest::IngestError> {
    match &d.source {
        SourceConfig::Csv { path, mapping } => ingest::load_csv(path, mapping, d.descriptor.clone()),
        SourceConfig::Json { path } => ingest::load_json(path, d.descriptor.clone()),
    }
}
