//! Domain types, pipeline configuration, and the on-disk annotation,
//! prediction, and report documents.
//!
//! Every document is JSON except the configuration, which is a flat TOML
//! key/value file. Timestamps are always seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Hyperparameters of both stages.
///
/// `Default` yields the challenge-submission values: stride 3, `w = 16`,
/// `s = 2`, `m = n = 3`, five intra-modal queries, 100-step windows, ten
/// boundary queries, `theta = 0.87`, Adam at 1e-5 / batch 16 for the local
/// stage and AdamW at 1e-4 / batch 32 for the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Spatial levels taken from the backbone pyramid.
    pub m: usize,
    /// Temporal receptive-field variants per spatial level.
    pub n: usize,
    /// Total bank levels; must equal `m * n`.
    pub levels: usize,
    /// Clip half-width in clip steps; clip length is `2w + 1`.
    pub w: usize,
    /// Frame stride inside a clip.
    pub s: usize,
    /// One frame out of every `eval_stride` is scored.
    pub eval_stride: usize,
    pub omega: usize,
    pub num_queries: usize,
    pub theta: f64,
    pub window_len: usize,
    /// Start-to-start distance of inference windows.
    pub window_stride: usize,
    /// Start-to-start distance of decoder training windows.
    pub train_window_stride: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub rel_dis_thresholds: Vec<f64>,
    pub lr_local: f64,
    pub batch_local: usize,
    pub epochs_local: usize,
    pub lr_decoder: f64,
    pub batch_decoder: usize,
    pub epochs_decoder: usize,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Seconds around a boundary that count as positive; `None` means one
    /// sampling interval (`eval_stride / fps`).
    pub local_positive_radius: Option<f64>,
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m: 3,
            n: 3,
            levels: 9,
            w: 16,
            s: 2,
            eval_stride: 3,
            omega: 5,
            num_queries: 10,
            theta: 0.87,
            window_len: 100,
            window_stride: 100,
            train_window_stride: 10,
            feature_dim: 64,
            heads: 4,
            decoder_layers: 2,
            rel_dis_thresholds: (1..=10).map(|k| k as f64 / 20.0).collect(),
            lr_local: 1e-5,
            batch_local: 16,
            epochs_local: 20,
            lr_decoder: 1e-4,
            batch_decoder: 32,
            epochs_decoder: 50,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            local_positive_radius: None,
            lambda_loc: 5.0,
            lambda_cls: 1.0,
            seed: 0,
        }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at epoch 0 toward zero.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Exactly the published hyperparameters.
    Published,
    /// Published hyperparameters with learning rates raised, cosine decay and
    /// stronger decoder weight decay, for training from scratch on a few
    /// hundred synthetic videos.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "published" => Ok(Self::Published),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Invalid(format!(
                "unknown preset {other:?} (expected `published` or `desk`)"
            ))),
        }
    }
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Published => Self::default(),
            Preset::Desk => Self {
                lr_local: 1e-3,
                lr_decoder: 1e-3,
                lr_schedule: LrSchedule::Cosine,
                weight_decay: 0.05,
                ..Self::default()
            },
        }
    }

    /// Clip length `T = 2w + 1`.
    pub fn clip_len(&self) -> usize {
        2 * self.w + 1
    }

    /// Kernel sizes of the temporal variants: `1, 3, 5, ...`.
    pub fn kernel_sizes(&self) -> Vec<usize> {
        (0..self.n).map(|k| 2 * k + 1).collect()
    }

    pub fn positive_radius(&self, fps: f64) -> f64 {
        self.local_positive_radius
            .unwrap_or(self.eval_stride as f64 / fps)
    }

    /// Reads a TOML file; missing keys keep their default values.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::resolve(Preset::Published, Some(path), &[])
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::overlay(Self::default(), table)
    }

    /// Preset values, overridden by the file, overridden by `key=value` pairs.
    /// Unless set explicitly, `levels` follows `m * n`.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            table = toml::from_str(&text).map_err(|e: toml::de::Error| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        for (key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(key.clone(), value);
        }
        Self::overlay(Self::preset(preset), table).map_err(Error::Invalid)
    }

    fn overlay(base: Self, table: toml::Table) -> std::result::Result<Self, String> {
        let derive_levels = !table.contains_key("levels");
        let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
        merged.extend(table);
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        if derive_levels {
            cfg.levels = cfg.m * cfg.n;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every invariant and reports all violations, not only the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<ConfigViolation>> {
        let mut v = Vec::new();
        let mut bad = |field: &'static str, message: String| {
            v.push(ConfigViolation { field, message })
        };
        if self.m < 1 {
            bad("m", "must be at least 1".into());
        }
        if self.n < 1 {
            bad("n", "must be at least 1".into());
        }
        if self.levels != self.m * self.n {
            bad(
                "levels",
                format!("L ≠ m×n ({} ≠ {}×{})", self.levels, self.m, self.n),
            );
        }
        if self.clip_len() < 2 * self.n.max(1) - 1 {
            bad(
                "w",
                format!("clip of {} steps is shorter than the widest kernel", self.clip_len()),
            );
        }
        if self.s < 1 {
            bad("s", "must be at least 1".into());
        }
        if self.eval_stride < 1 {
            bad("eval_stride", "must be at least 1".into());
        }
        if self.omega < 1 {
            bad("omega", "must be at least 1".into());
        }
        if self.num_queries < 1 {
            bad("num_queries", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            bad("theta", format!("{} is outside [0, 1]", self.theta));
        }
        if self.window_len < 1 {
            bad("window_len", "must be at least 1".into());
        }
        if self.window_stride < 1 || self.window_stride > self.window_len {
            bad("window_stride", "must be in 1..=window_len".into());
        }
        if self.train_window_stride < 1 {
            bad("train_window_stride", "must be at least 1".into());
        }
        if self.heads < 1 || self.feature_dim % self.heads.max(1) != 0 {
            bad(
                "heads",
                format!("feature_dim {} not divisible by {} heads", self.feature_dim, self.heads),
            );
        }
        if self.feature_dim < 1 {
            bad("feature_dim", "must be at least 1".into());
        }
        if self.decoder_layers < 1 {
            bad("decoder_layers", "must be at least 1".into());
        }
        if self.rel_dis_thresholds.is_empty() {
            bad("rel_dis_thresholds", "must not be empty".into());
        }
        if self
            .rel_dis_thresholds
            .iter()
            .any(|&t| !(t > 0.0 && t <= 1.0))
        {
            bad("rel_dis_thresholds", "every threshold must be in (0, 1]".into());
        }
        if self.rel_dis_thresholds.windows(2).any(|p| p[1] <= p[0]) {
            bad("rel_dis_thresholds", "must be strictly increasing".into());
        }
        for (field, lr) in [("lr_local", self.lr_local), ("lr_decoder", self.lr_decoder)] {
            if !(lr > 0.0 && lr.is_finite()) {
                bad(field, format!("{lr} is not a positive learning rate"));
            }
        }
        if self.batch_local < 1 {
            bad("batch_local", "must be at least 1".into());
        }
        if self.batch_decoder < 1 {
            bad("batch_decoder", "must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            bad("weight_decay", "must be non-negative".into());
        }
        if let Some(r) = self.local_positive_radius {
            if !(r > 0.0) {
                bad("local_positive_radius", "must be positive".into());
            }
        }
        if !(self.lambda_loc >= 0.0) {
            bad("lambda_loc", "must be non-negative".into());
        }
        if !(self.lambda_cls >= 0.0) {
            bad("lambda_cls", "must be non-negative".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

/// Shorthand for [`PipelineConfig::validate`].
pub fn validate_config(cfg: &PipelineConfig) -> std::result::Result<(), Vec<ConfigViolation>> {
    cfg.validate()
}

/// One video's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub id: String,
    pub duration: f64,
    #[serde(rename = "fps")]
    pub frame_rate: f64,
    pub boundaries: Vec<f64>,
}

impl AnnotatedVideo {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Error::Malformed {
            id: self.id.clone(),
            field,
            reason,
        };
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(bad("duration", format!("{} is not a positive duration", self.duration)));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(bad("fps", format!("{} is not a positive frame rate", self.frame_rate)));
        }
        if self.boundaries.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(bad("boundaries", "unsorted boundaries".into()));
        }
        if let Some(b) = self
            .boundaries
            .iter()
            .find(|&&b| !(b > 0.0 && b < self.duration))
        {
            return Err(bad(
                "boundaries",
                format!("boundary {b} outside (0, {})", self.duration),
            ));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }
}

/// Time-stamped `T x C` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    pub values: Matrix<S>,
    pub step_seconds: f64,
    pub origin_seconds: f64,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(values: Matrix<S>, step_seconds: f64, origin_seconds: f64) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence must be non-empty, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("feature sequence has non-finite entries".into()));
        }
        Ok(Self {
            values,
            step_seconds,
            origin_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.origin_seconds + index as f64 * self.step_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPrediction {
    pub time: f64,
    pub confidence: f64,
}

/// Predictions keyed by video id, in id order.
pub type PredictionMap = BTreeMap<String, Vec<BoundaryPrediction>>;

/// Counts and scores at one Rel.Dis. threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub id: String,
    pub rows: Vec<ThresholdRow>,
}

/// Micro-averaged rows (primary), macro-averaged rows, and per-video rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdRow>,
    #[serde(rename = "macro")]
    pub macro_rows: Vec<ThresholdRow>,
    pub per_video: Vec<VideoReport>,
}

impl EvalReport {
    pub fn row_at(&self, threshold: f64) -> Option<&ThresholdRow> {
        self.rows
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `contents` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn parse_annotations(text: &str) -> std::result::Result<Vec<AnnotatedVideo>, String> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, record) in raw.into_iter().enumerate() {
        let id = record
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{i}"), str::to_owned);
        let video: AnnotatedVideo = serde_json::from_value(record)
            .map_err(|e| format!("record {id:?}: {e}"))?;
        video.validate().map_err(|e| e.to_string())?;
        out.push(video);
    }
    Ok(out)
}

/// Reads an annotation file: a JSON list of `{id, duration, fps, boundaries}`.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedVideo>> {
    let text = read_text(path)?;
    let raw: Vec<serde_json::Value> = parse_json(path, &text)?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, record) in raw.into_iter().enumerate() {
        let id = record
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{i}"), str::to_owned);
        let video: AnnotatedVideo = serde_json::from_value(record).map_err(|e| Error::Malformed {
            id: id.clone(),
            field: "record",
            reason: e.to_string(),
        })?;
        video.validate()?;
        out.push(video);
    }
    Ok(out)
}

pub fn write_annotations(videos: &[AnnotatedVideo], path: &Path) -> Result<()> {
    write_json(path, &videos)
}

pub fn write_predictions(preds: &PredictionMap, path: &Path) -> Result<()> {
    for (id, list) in preds {
        if let Some(p) = list
            .iter()
            .find(|p| !(0.0..=1.0).contains(&p.confidence) || !p.time.is_finite())
        {
            return Err(Error::Malformed {
                id: id.clone(),
                field: "confidence",
                reason: format!("prediction {p:?} violates time/confidence invariants"),
            });
        }
    }
    write_json(path, preds)
}

/// Reads a prediction file: a JSON object mapping id to `[{time, confidence}]`.
pub fn load_predictions(path: &Path) -> Result<PredictionMap> {
    let text = read_text(path)?;
    let preds: PredictionMap = parse_json(path, &text)?;
    for (id, list) in &preds {
        for p in list {
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Malformed {
                    id: id.clone(),
                    field: "confidence",
                    reason: format!("{} outside [0, 1]", p.confidence),
                });
            }
            if !p.time.is_finite() {
                return Err(Error::Malformed {
                    id: id.clone(),
                    field: "time",
                    reason: "non-finite timestamp".into(),
                });
            }
        }
    }
    Ok(preds)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = read_text(path)?;
    parse_json(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(id: &str, boundaries: Vec<f64>) -> AnnotatedVideo {
        AnnotatedVideo {
            id: id.into(),
            duration: 10.0,
            frame_rate: 30.0,
            boundaries,
        }
    }

    #[test]
    fn parses_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.json");
        fs::write(
            &p,
            r#"[{"id":"v1","duration":10.0,"fps":30,"boundaries":[5.0]}]"#,
        )
        .unwrap();
        let v = load_annotations(&p).unwrap();
        assert_eq!(v, vec![one("v1", vec![5.0])]);
    }

    #[test]
    fn rejects_unsorted_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.json");
        fs::write(
            &p,
            r#"[{"id":"v1","duration":10.0,"fps":30,"boundaries":[5.0,2.0]}]"#,
        )
        .unwrap();
        let err = load_annotations(&p).unwrap_err().to_string();
        assert!(err.contains("unsorted boundaries"), "{err}");
        assert!(err.contains("v1"));
    }

    #[test]
    fn empty_boundaries_are_valid() {
        assert!(one("v", vec![]).validate().is_ok());
    }

    #[test]
    fn boundary_outside_open_interval_is_rejected() {
        assert!(one("v", vec![0.0]).validate().is_err());
        assert!(one("v", vec![10.0]).validate().is_err());
        assert!(one("v", vec![9.99]).validate().is_ok());
    }

    #[test]
    fn malformed_record_names_video_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.json");
        fs::write(&p, r#"[{"id":"v9","duration":"long","fps":30,"boundaries":[]}]"#).unwrap();
        let err = load_annotations(&p).unwrap_err().to_string();
        assert!(err.contains("v9"), "{err}");
        assert!(load_annotations(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn predictions_round_trip_and_reject_bad_confidence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.json");
        let mut preds = PredictionMap::new();
        preds.insert(
            "v1".into(),
            vec![BoundaryPrediction {
                time: 5.0,
                confidence: 0.9,
            }],
        );
        write_predictions(&preds, &p).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);

        write_predictions(&PredictionMap::new(), &p).unwrap();
        assert!(load_predictions(&p).unwrap().is_empty());

        fs::write(&p, r#"{"v1":[{"time":5.0,"confidence":1.2}]}"#).unwrap();
        assert!(load_predictions(&p).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig::default();
        assert_eq!(
            (cfg.m, cfg.n, cfg.w, cfg.s, cfg.omega, cfg.num_queries, cfg.window_len),
            (3, 3, 16, 2, 5, 10, 100)
        );
        assert_eq!(cfg.theta, 0.87);
        assert_eq!(cfg.eval_stride, 3);
        assert_eq!((cfg.lr_local, cfg.batch_local), (1e-5, 16));
        assert_eq!((cfg.lr_decoder, cfg.batch_decoder), (1e-4, 32));
        assert_eq!(validate_config(&cfg), Ok(()));
        assert_eq!(cfg.clip_len(), 33);
    }

    #[test]
    fn theta_out_of_range_is_one_violation() {
        let cfg = PipelineConfig {
            theta: 1.5,
            ..Default::default()
        };
        let v = validate_config(&cfg).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "theta");
    }

    #[test]
    fn level_count_mismatch_is_reported() {
        let cfg = PipelineConfig {
            m: 2,
            n: 3,
            levels: 5,
            ..Default::default()
        };
        let v = validate_config(&cfg).unwrap_err();
        assert!(v.iter().any(|x| x.message.contains("L ≠ m×n")));
    }

    #[test]
    fn all_violations_are_reported() {
        let cfg = PipelineConfig {
            theta: -0.1,
            window_len: 0,
            rel_dis_thresholds: vec![0.2, 0.1],
            ..Default::default()
        };
        let fields: Vec<_> = validate_config(&cfg)
            .unwrap_err()
            .into_iter()
            .map(|v| v.field)
            .collect();
        assert!(fields.contains(&"theta"));
        assert!(fields.contains(&"window_len"));
        assert!(fields.contains(&"rel_dis_thresholds"));
    }

    #[test]
    fn toml_fills_defaults_and_derives_levels() {
        let cfg = PipelineConfig::from_toml_str("m = 2\nn = 2\ntheta = 0.5\n").unwrap();
        assert_eq!(cfg.levels, 4);
        assert_eq!(cfg.theta, 0.5);
        assert_eq!(cfg.window_len, 100);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
    }
}
