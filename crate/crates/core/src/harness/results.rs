//! Result rows, their CSV form and the Markdown tables derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::write_atomic;
use crate::error::{CdmError, Result};

pub const METRICS: [&str; 4] = ["rmse_q025", "rmse_median", "rmse_q975", "w1"];

/// Quantile level of an RMSE metric; `None` for `w1`.
pub fn metric_level(metric: &str) -> Option<f64> {
    match metric {
        "rmse_q025" => Some(0.025),
        "rmse_median" => Some(0.5),
        "rmse_q975" => Some(0.975),
        _ => None,
    }
}

fn metric_label(metric: &str) -> &'static str {
    match metric {
        "rmse_q025" => "RMSE (2.5% quantile)",
        "rmse_median" => "RMSE (median)",
        "rmse_q975" => "RMSE (97.5% quantile)",
        _ => "Wasserstein-1",
    }
}

/// One metric value (percentage of `V_max`) for one experiment point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub gamma: f64,
    pub seed: u64,
    pub method: String,
    pub metric: String,
    pub level: Option<f64>,
    pub value: f64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn validate(&self) -> Result<()> {
        if !METRICS.contains(&self.metric.as_str()) {
            return Err(CdmError::Format(format!("unknown metric {:?}", self.metric)));
        }
        if !(self.value >= 0.0) {
            return Err(CdmError::Format(format!("{} value {} is not a nonnegative number", self.metric, self.value)));
        }
        Ok(())
    }
}

/// Wall-clock seconds spent in one stage of one experiment point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub gamma: f64,
    pub seed: u64,
    pub method: String,
    pub stage: String,
    pub seconds: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> CdmError {
    CdmError::Format(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CdmError::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| CdmError::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let rows: Vec<ResultRow> = read_csv(path)?;
    for r in &rows {
        r.validate()?;
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Values grouped by `(method, metric, γ)` across seeds, in first-seen order
/// of methods and ascending γ.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub methods: Vec<String>,
    pub gammas: Vec<f64>,
    cells: BTreeMap<(String, String, u64), Vec<f64>>,
}

impl Summary {
    pub fn new(rows: &[ResultRow]) -> Self {
        let mut s = Summary::default();
        for r in rows {
            if !s.methods.contains(&r.method) {
                s.methods.push(r.method.clone());
            }
            if !s.gammas.contains(&r.gamma) {
                s.gammas.push(r.gamma);
            }
            s.cells.entry((r.method.clone(), r.metric.clone(), r.gamma.to_bits())).or_default().push(r.value);
        }
        s.gammas.sort_by(f64::total_cmp);
        s
    }

    pub fn values(&self, method: &str, metric: &str, gamma: f64) -> Option<&[f64]> {
        self.cells.get(&(method.to_string(), metric.to_string(), gamma.to_bits())).map(|v| v.as_slice())
    }

    pub fn mean(&self, method: &str, metric: &str, gamma: f64) -> Option<f64> {
        self.values(method, metric, gamma).map(|v| mean_std(v).0)
    }

    fn cell(&self, method: &str, metric: &str, gamma: f64, with_std: bool) -> String {
        match self.values(method, metric, gamma) {
            None => "n/a".into(),
            Some(v) => {
                let (m, s) = mean_std(v);
                if with_std && v.len() > 1 {
                    format!("{m:.3} ± {s:.3}")
                } else {
                    format!("{m:.3}")
                }
            }
        }
    }

    fn gamma_header(&self, first: &str) -> String {
        let mut out = format!("| {first} |");
        for g in &self.gammas {
            let _ = write!(out, " γ = {g} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.gammas.len()));
        out.push('\n');
        out
    }

    /// Metrics as rows and γ as columns, one table per method.
    pub fn metric_tables(&self) -> String {
        let mut out = String::new();
        for method in &self.methods {
            let _ = writeln!(out, "### {method}\n");
            out.push_str(&self.gamma_header("Metric (% of V_max)"));
            for metric in METRICS {
                let _ = write!(out, "| {} |", metric_label(metric));
                for &g in &self.gammas {
                    let _ = write!(out, " {} |", self.cell(method, metric, g, true));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Methods as rows and γ as columns, one table per metric.
    pub fn method_tables(&self, label: impl Fn(&str) -> String) -> String {
        let mut out = String::new();
        for metric in METRICS {
            let _ = writeln!(out, "### {} (% of V_max)\n", metric_label(metric));
            out.push_str(&self.gamma_header("Variant"));
            for method in &self.methods {
                let _ = write!(out, "| {} |", label(method));
                for &g in &self.gammas {
                    let _ = write!(out, " {} |", self.cell(method, metric, g, true));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Mean and standard deviation across seeds for every metric and γ.
    pub fn seed_table(&self) -> String {
        let mut out = String::new();
        for method in &self.methods {
            let _ = writeln!(out, "### {method}\n");
            out.push_str("| Metric (% of V_max) | γ | seeds | mean | std |\n|---|---:|---:|---:|---:|\n");
            for metric in METRICS {
                for &g in &self.gammas {
                    if let Some(v) = self.values(method, metric, g) {
                        let (m, s) = mean_std(v);
                        let _ = writeln!(out, "| {} | {g} | {} | {m:.4} | {s:.4} |", metric_label(metric), v.len());
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(gamma: f64, seed: u64, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            gamma,
            seed,
            method: "cdm".into(),
            metric: metric.into(),
            level: metric_level(metric),
            value,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row(0.0, 1, "w1", 0.125), row(5.0, 1, "rmse_q975", 1.0 / 3.0)];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_results(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("gamma,seed,method,metric,level,value,config_hash\n"));
        assert!(text.contains("0.0,1,cdm,w1,,0.125,abc"));
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(row(0.0, 0, "crps", 1.0).validate().is_err());
        assert!(row(0.0, 0, "w1", -1.0).validate().is_err());
        assert!(row(0.0, 0, "w1", f64::NAN).validate().is_err());
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![row(5.0, 0, "w1", 1.0), row(5.0, 1, "w1", 3.0), row(0.0, 0, "w1", 2.0)];
        let s = Summary::new(&rows);
        assert_eq!(s.gammas, vec![0.0, 5.0]);
        let (m, sd) = mean_std(s.values("cdm", "w1", 5.0).unwrap());
        assert_eq!((m, sd), (2.0, 2f64.sqrt()));
        assert!(s.metric_tables().contains("| Wasserstein-1 | 2.000 | 2.000 ± 1.414 |"));
    }
}
