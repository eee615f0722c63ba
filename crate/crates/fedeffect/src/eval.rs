//! Effect-estimation metrics and machine-readable reports.
//!
//! Two error measures: the mean squared individual-effect error (reported
//! with its square root) and the absolute error of the average effect.
//! Reports are written twice, as a JSON document for one run and as a flat
//! CSV row appended to an aggregation file so repeated seeds stack into a
//! table.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Variant;
use crate::error::Error;
use crate::Result;

/// Mean squared error of individual effects, pooled over all units of all
/// sources, together with its square root.
///
/// The denominator is the total unit count, which reduces to the usual
/// sources-times-rows normalization when sources share a size.
pub fn pehe(true_ite: &[DVector<f64>], est_ite: &[DVector<f64>]) -> Result<(f64, f64)> {
    if true_ite.len() != est_ite.len() {
        return Err(Error::ShapeMismatch {
            context: "pehe",
            detail: format!(
                "{} truth vectors against {} estimate vectors",
                true_ite.len(),
                est_ite.len()
            ),
        });
    }
    let mut total = 0usize;
    let mut acc = 0.0;
    for (s, (truth, est)) in true_ite.iter().zip(est_ite).enumerate() {
        if truth.len() != est.len() {
            return Err(Error::ShapeMismatch {
                context: "pehe",
                detail: format!(
                    "source {s}: truth has {} units, estimate has {}",
                    truth.len(),
                    est.len()
                ),
            });
        }
        total += truth.len();
        acc += (truth - est).norm_squared();
    }
    if total == 0 {
        return Err(Error::InsufficientData {
            context: "pehe",
            need: 1,
            got: 0,
        });
    }
    let eps = acc / total as f64;
    Ok((eps, eps.sqrt()))
}

/// Absolute error of the average effect.
pub fn ate_error(true_ate: f64, est_ate: f64) -> f64 {
    (true_ate - est_ate).abs()
}

/// Average effect implied by per-source individual effects: the pooled mean.
pub fn pooled_ate(ite: &[DVector<f64>]) -> Result<f64> {
    let total: usize = ite.iter().map(|v| v.len()).sum();
    if total == 0 {
        return Err(Error::InsufficientData {
            context: "pooled_ate",
            need: 1,
            got: 0,
        });
    }
    Ok(ite.iter().map(|v| v.sum()).sum::<f64>() / total as f64)
}

/// Metrics for one data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_units: usize,
    pub eps_pehe: f64,
    pub sqrt_pehe: f64,
    pub true_ate: f64,
    pub est_ate: f64,
    pub ate_error: f64,
}

impl SplitMetrics {
    /// Compute both metrics for one split from per-source effect vectors.
    pub fn compute(true_ite: &[DVector<f64>], est_ite: &[DVector<f64>]) -> Result<SplitMetrics> {
        let (eps_pehe, sqrt_pehe) = pehe(true_ite, est_ite)?;
        let true_ate = pooled_ate(true_ite)?;
        let est_ate = pooled_ate(est_ite)?;
        Ok(SplitMetrics {
            n_units: true_ite.iter().map(|v| v.len()).sum(),
            eps_pehe,
            sqrt_pehe,
            true_ate,
            est_ate,
            ate_error: ate_error(true_ate, est_ate),
        })
    }
}

/// Full report for one run. The top-level numbers repeat the test split,
/// the headline in any cross-run comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub variant: Variant,
    pub m_used: usize,
    pub config_digest: String,
    pub sqrt_pehe: f64,
    pub ate_error: f64,
    pub per_split: BTreeMap<String, SplitMetrics>,
}

impl MetricsReport {
    /// Assemble a report; the `test` split must be present as it supplies
    /// the headline numbers.
    pub fn new(
        seed: u64,
        variant: Variant,
        m_used: usize,
        config_digest: String,
        per_split: BTreeMap<String, SplitMetrics>,
    ) -> Result<MetricsReport> {
        let test = per_split.get("test").ok_or(Error::InvalidConfig {
            detail: "metrics report requires a `test` split".into(),
        })?;
        Ok(MetricsReport {
            seed,
            variant,
            m_used,
            config_digest,
            sqrt_pehe: test.sqrt_pehe,
            ate_error: test.ate_error,
            per_split,
        })
    }
}

/// CSV header of the aggregation file.
pub const METRICS_CSV_HEADER: &str = "seed,variant,m_used,sqrt_pehe,ate_error,wall_s";

/// Write `metrics.json` into `dir` and append one row to `metrics.csv`
/// there, creating the CSV with its header on first use. The wall time
/// goes only to the CSV row, keeping the JSON free of run-dependent bytes.
pub fn emit_report(report: &MetricsReport, wall_s: f64, dir: &Path) -> Result<()> {
    let json_path = dir.join("metrics.json");
    let body = serde_json::to_string_pretty(report).map_err(|e| Error::InvalidConfig {
        detail: format!("report serialization failed: {e}"),
    })?;
    std::fs::write(&json_path, body + "\n")
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let csv_path = dir.join("metrics.csv");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let fresh = file
        .metadata()
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?
        .len()
        == 0;
    let mut row = String::new();
    if fresh {
        row.push_str(METRICS_CSV_HEADER);
        row.push('\n');
    }
    row.push_str(&format!(
        "{},{},{},{},{},{}\n",
        report.seed, report.variant, report.m_used, report.sqrt_pehe, report.ate_error, wall_s
    ));
    file.write_all(row.as_bytes())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))
}

/// Read back a JSON report written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::SchemaError {
        path: path.display().to_string(),
        detail: format!("malformed metrics report: {e}"),
    })
}

/// Sample mean and its standard error (sample sd over the square root of
/// the count). A single value has standard error zero.
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InsufficientData {
            context: "mean_and_se",
            need: 1,
            got: 0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Median; even counts average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData {
            context: "median",
            need: 1,
            got: 0,
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median over non-finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok(0.5 * (sorted[n / 2 - 1] + sorted[n / 2]))
    }
}
