//! Effective pipeline configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! backend.kind = mock
//! backend.scenario_path = scenario.json
//! nms_iou = 0.3
//! expected_labels = CT Secondary Circuit Panel, Grounding Point Cluster
//! ```
//!
//! Keys are dotted, values run to the end of the line (surrounding double
//! quotes are stripped), and relative paths resolve against the file's
//! directory. [`Config::KEYS`] lists every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{BackendConfig, BackendKind};
use crate::error::{Error, Result};
use crate::report::canonical_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityFormula {
    /// `diagnostic_confidence * min(supporting confidences)`
    ProductMin,
    /// Geometric mean of the diagnostic confidence and every supporting confidence.
    GeometricMean,
}

impl ReliabilityFormula {
    pub fn as_str(self) -> &'static str {
        match self {
            ReliabilityFormula::ProductMin => "product_min",
            ReliabilityFormula::GeometricMean => "geometric_mean",
        }
    }
}

pub const DEFAULT_EXPECTED_LABELS: [&str; 3] = [
    "CT Secondary Circuit Panel",
    "Secondary Terminal Block Panel",
    "Grounding Point Cluster",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub backend: BackendConfig,
    /// Side of the square stage-1 overview canvas.
    pub overview_size: u32,
    pub nms_iou: f64,
    pub conf_threshold: f64,
    pub epsilon: f64,
    pub dedup_iou: f64,
    pub max_inflight: usize,
    /// Re-asks after an unparseable stage response.
    pub max_retries: u32,
    pub templates_dir: Option<PathBuf>,
    pub reliability_formula: ReliabilityFormula,
    pub max_crop_side: u32,
    pub crop_overlap: f64,
    pub confidence_floor: f64,
    /// External OCR program; receives a PNG path, prints a JSON array.
    pub ocr_command: Option<String>,
    pub stage3_attach_overview: bool,
    /// Annotation vocabulary used for class-aware evaluation matching.
    pub expected_labels: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backend: BackendConfig::default(),
            overview_size: 1024,
            nms_iou: 0.3,
            conf_threshold: 0.6,
            epsilon: 0.1,
            dedup_iou: 0.7,
            max_inflight: 4,
            max_retries: 2,
            templates_dir: None,
            reliability_formula: ReliabilityFormula::ProductMin,
            max_crop_side: 4096,
            crop_overlap: 0.1,
            confidence_floor: 0.01,
            ocr_command: None,
            stage3_attach_overview: false,
            expected_labels: DEFAULT_EXPECTED_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn opt(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_owned())
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "backend.kind",
        "backend.endpoint_url",
        "backend.model_name",
        "backend.auth_token_env",
        "backend.timeout_secs",
        "backend.max_retries",
        "backend.retry_backoff_ms",
        "backend.scenario_path",
        "backend.cache_dir",
        "backend.payload_limit_bytes",
        "overview_size",
        "nms_iou",
        "conf_threshold",
        "epsilon",
        "dedup_iou",
        "max_inflight",
        "max_retries",
        "templates_dir",
        "reliability_formula",
        "max_crop_side",
        "crop_overlap",
        "confidence_floor",
        "ocr.command",
        "stage3.attach_overview",
        "expected_labels",
    ];

    /// Apply one setting. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let v = value.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        let path = |s: &str| -> Option<PathBuf> {
            opt(s).map(|s| match base {
                Some(b) if Path::new(&s).is_relative() => b.join(s),
                _ => PathBuf::from(s),
            })
        };
        let b = &mut self.backend;
        match key {
            "backend.kind" => {
                b.kind = match v {
                    "http" => BackendKind::Http,
                    "mock" => BackendKind::Mock,
                    _ => return Err(Error::Config(format!("backend.kind: unknown {v:?}"))),
                }
            }
            "backend.endpoint_url" => b.endpoint_url = v.to_owned(),
            "backend.model_name" => b.model_name = v.to_owned(),
            "backend.auth_token_env" => b.auth_token_env = v.to_owned(),
            "backend.timeout_secs" => b.timeout_secs = parse_int(key, v)?,
            "backend.max_retries" => b.max_retries = parse_int(key, v)?,
            "backend.retry_backoff_ms" => b.retry_backoff_ms = parse_int(key, v)?,
            "backend.scenario_path" => b.scenario_path = path(v),
            "backend.cache_dir" => b.cache_dir = path(v),
            "backend.payload_limit_bytes" => b.payload_limit_bytes = parse_int(key, v)?,
            "overview_size" => self.overview_size = parse_int(key, v)?,
            "nms_iou" => self.nms_iou = parse_f64(key, v)?,
            "conf_threshold" => self.conf_threshold = parse_f64(key, v)?,
            "epsilon" => self.epsilon = parse_f64(key, v)?,
            "dedup_iou" => self.dedup_iou = parse_f64(key, v)?,
            "max_inflight" => self.max_inflight = parse_int(key, v)?,
            "max_retries" => self.max_retries = parse_int(key, v)?,
            "templates_dir" => self.templates_dir = path(v),
            "reliability_formula" => {
                self.reliability_formula = match v {
                    "product_min" => ReliabilityFormula::ProductMin,
                    "geometric_mean" => ReliabilityFormula::GeometricMean,
                    _ => return Err(Error::Config(format!("reliability_formula: unknown {v:?}"))),
                }
            }
            "max_crop_side" => self.max_crop_side = parse_int(key, v)?,
            "crop_overlap" => self.crop_overlap = parse_f64(key, v)?,
            "confidence_floor" => self.confidence_floor = parse_f64(key, v)?,
            "ocr.command" => self.ocr_command = opt(v),
            "stage3.attach_overview" => self.stage3_attach_overview = parse_bool(key, v)?,
            "expected_labels" => {
                self.expected_labels = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse config text on top of the defaults.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v, base)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("conf_threshold", self.conf_threshold),
            ("epsilon", self.epsilon),
            ("dedup_iou", self.dedup_iou),
            ("crop_overlap", self.crop_overlap),
            ("confidence_floor", self.confidence_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.overview_size < 16 {
            return Err(Error::Config("overview_size must be >= 16".into()));
        }
        if self.max_inflight == 0 {
            return Err(Error::Config("max_inflight must be >= 1".into()));
        }
        if self.max_crop_side == 0 {
            return Err(Error::Config("max_crop_side must be >= 1".into()));
        }
        Ok(())
    }

    /// Serializes back to the flat file format.
    pub fn to_kv(&self) -> String {
        let b = &self.backend;
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("backend.kind", match b.kind {
                BackendKind::Http => "http".into(),
                BackendKind::Mock => "mock".into(),
            }),
            ("backend.endpoint_url", b.endpoint_url.clone()),
            ("backend.model_name", b.model_name.clone()),
            ("backend.auth_token_env", b.auth_token_env.clone()),
            ("backend.timeout_secs", b.timeout_secs.to_string()),
            ("backend.max_retries", b.max_retries.to_string()),
            ("backend.retry_backoff_ms", b.retry_backoff_ms.to_string()),
            ("backend.scenario_path", p(&b.scenario_path)),
            ("backend.cache_dir", p(&b.cache_dir)),
            ("backend.payload_limit_bytes", b.payload_limit_bytes.to_string()),
            ("overview_size", self.overview_size.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("conf_threshold", self.conf_threshold.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("dedup_iou", self.dedup_iou.to_string()),
            ("max_inflight", self.max_inflight.to_string()),
            ("max_retries", self.max_retries.to_string()),
            ("templates_dir", p(&self.templates_dir)),
            ("reliability_formula", self.reliability_formula.as_str().into()),
            ("max_crop_side", self.max_crop_side.to_string()),
            ("crop_overlap", self.crop_overlap.to_string()),
            ("confidence_floor", self.confidence_floor.to_string()),
            ("ocr.command", self.ocr_command.clone().unwrap_or_default()),
            ("stage3.attach_overview", self.stage3_attach_overview.to_string()),
            ("expected_labels", self.expected_labels.join(", ")),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical JSON of every behavior-affecting setting.
    /// The cache directory is excluded: caching never changes results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.backend.cache_dir = None;
        let v = serde_json::to_value(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}
