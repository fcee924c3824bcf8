//! Client settings and their plain-text `key = value` file format.

use std::path::{Path, PathBuf};
use std::time::Duration;

use cxr_core::dataset::ScanId;
use cxr_core::imaging::PreprocessConfig;

use crate::netsim::LinkProfile;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub data_dir: PathBuf,
    /// Deployment name; prefixes every scan id.
    pub client_id: String,
    /// Opaque credential forwarded in request metadata.
    pub token: String,
    pub preprocess: PreprocessConfig,
    pub predict_timeout: Duration,
    pub flush_timeout: Duration,
    /// Deadline for one window of model chunks.
    pub chunk_timeout: Duration,
    /// Chunk requests in flight per window.
    pub window: usize,
    pub sync_interval: Duration,
    /// Retry period for the background lane while the server is unreachable.
    pub retry_interval: Duration,
    pub server: Option<String>,
    pub http: String,
    pub ui_dir: Option<PathBuf>,
    /// Simulated link used instead of TCP when set.
    pub link: Option<LinkProfile>,
}

impl ClientConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_dir",
        "client_id",
        "token",
        "gamma",
        "predict_timeout_s",
        "flush_timeout_s",
        "chunk_timeout_s",
        "window",
        "sync_interval_h",
        "retry_interval_s",
        "server",
        "http",
        "ui_dir",
        "bandwidth_kbps",
        "latency_ms",
    ];

    pub fn new(data_dir: impl Into<PathBuf>, client_id: impl Into<String>) -> Self {
        Self {
            data_dir: data_dir.into(),
            client_id: client_id.into(),
            token: String::new(),
            preprocess: PreprocessConfig::default(),
            predict_timeout: Duration::from_secs(10),
            flush_timeout: Duration::from_secs(60),
            chunk_timeout: Duration::from_secs(120),
            window: 8,
            sync_interval: Duration::from_secs(6 * 3600),
            retry_interval: Duration::from_secs(30),
            server: None,
            http: "127.0.0.1:8088".into(),
            ui_dir: None,
            link: None,
        }
    }

    pub fn model_dir(&self) -> PathBuf {
        self.data_dir.join("model")
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.data_dir.join("scans")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // the id must leave room for the "-000000" suffix
        if self.client_id.len() > 100 || ScanId::new(format!("{}-000001", self.client_id)).is_err() {
            return Err(ConfigError::Invalid(format!("client_id {:?} must be 1-100 of [A-Za-z0-9._~-]", self.client_id)));
        }
        if self.token.len() > 255 {
            return Err(ConfigError::Invalid("token longer than 255 bytes".into()));
        }
        self.preprocess.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.preprocess.target_side != cxr_core::dataset::SCAN_SIDE {
            return Err(ConfigError::Invalid("the wire format carries 128x128 scans".into()));
        }
        if self.window == 0 {
            return Err(ConfigError::Invalid("window must be >= 1".into()));
        }
        if let Some(p) = &self.link {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::new(base.join("client-data"), "edge");
        let mut link: Option<LinkProfile> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("{k}: {v:?} is not a number")));
            let secs = |v: &str| -> Result<Duration, ConfigError> {
                let s = num(v)?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(err(format!("{k} must be > 0")));
                }
                Ok(Duration::from_secs_f64(s))
            };
            let path = |v: &str| {
                let p = PathBuf::from(v);
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            };
            match k {
                "data_dir" => cfg.data_dir = path(v),
                "client_id" => cfg.client_id = v.to_string(),
                "token" => cfg.token = v.to_string(),
                "gamma" => cfg.preprocess.gamma = num(v)?,
                "predict_timeout_s" => cfg.predict_timeout = secs(v)?,
                "flush_timeout_s" => cfg.flush_timeout = secs(v)?,
                "chunk_timeout_s" => cfg.chunk_timeout = secs(v)?,
                "window" => cfg.window = v.parse().map_err(|_| err(format!("window: {v:?}")))?,
                "sync_interval_h" => cfg.sync_interval = Duration::from_secs_f64(secs(v)?.as_secs_f64() * 3600.0),
                "retry_interval_s" => cfg.retry_interval = secs(v)?,
                "server" => cfg.server = Some(v.to_string()),
                "http" => cfg.http = v.to_string(),
                "ui_dir" => cfg.ui_dir = Some(path(v)),
                "bandwidth_kbps" => link.get_or_insert_with(LinkProfile::dialup).bandwidth_kbps = num(v)?,
                "latency_ms" => link.get_or_insert_with(LinkProfile::dialup).latency_ms = num(v)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.link = link;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}
