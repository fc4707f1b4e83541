//! JSON evaluation reports with a fixed key schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stvsr_core::metrics::{ClipMetrics, MetricReport, Metrics};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub psnr: f64,
    pub ssim: f64,
    pub tof: f64,
    pub tlp: f64,
}

impl From<Metrics> for MetricRow {
    fn from(m: Metrics) -> Self {
        Self { psnr: m.psnr, ssim: m.ssim, tof: m.tof, tlp: m.tlp }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRow {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub tool_version: String,
    pub fingerprint: String,
    pub clips: Vec<ClipRow>,
    pub mean: MetricRow,
}

impl Report {
    pub fn from_metrics(r: &MetricReport) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            fingerprint: r.fingerprint.clone(),
            clips: r.clips.iter().map(|c: &ClipMetrics| ClipRow { id: c.id.clone(), metrics: c.metrics.into() }).collect(),
            mean: r.mean.into(),
        }
    }
}

/// One arm of an ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmReport {
    pub arm: String,
    pub final_loss: Option<f64>,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub tool_version: String,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub baseline: Report,
    pub arms: Vec<ArmReport>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialises");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    fs::write(path, to_json(value)).map_err(|e| ReportError::Io { path: path.display().to_string(), source: e })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = fs::read_to_string(path).map_err(|e| ReportError::Io { path: path.display().to_string(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}
