use std::fmt::Write as _;

use super::metrics::Metrics;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub rmse_tau: f64,
    /// This method's RMSE over the reference method's.
    pub rmse_ratio: f64,
    pub mae_tau: f64,
    pub rmse_log: f64,
    pub mean_rel_err: f64,
    pub flatness: f64,
    pub worst_bin_rmse: f64,
    pub saturation_fraction: f64,
}

/// Side-by-side summary of methods evaluated on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub testset_id: String,
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Builds the comparison. The reference is the first method whose name
/// starts with `caac`, or the first input otherwise.
pub fn compare(metrics: &[Metrics]) -> Result<Comparison> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::config("nothing to compare"))?;
    if let Some(m) = metrics.iter().find(|m| m.testset_id != first.testset_id) {
        return Err(Error::Mismatch(format!(
            "{} was evaluated on test set {} but {} on {}",
            m.method, m.testset_id, first.method, first.testset_id
        )));
    }
    let reference = metrics
        .iter()
        .find(|m| m.method.starts_with("caac"))
        .unwrap_or(first);
    let base = reference.overall.rmse_tau;
    let rows = metrics
        .iter()
        .map(|m| ComparisonRow {
            method: m.method.clone(),
            rmse_tau: m.overall.rmse_tau,
            rmse_ratio: ratio(m.overall.rmse_tau, base),
            mae_tau: m.overall.mae_tau,
            rmse_log: m.overall.rmse_log,
            mean_rel_err: m.overall.mean_rel_err,
            flatness: m.flatness,
            worst_bin_rmse: m.worst_sza_bin_rmse(),
            saturation_fraction: m.overall.saturation_fraction,
        })
        .collect();
    Ok(Comparison {
        testset_id: first.testset_id.clone(),
        reference: reference.method.clone(),
        rows,
    })
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# testset={}\n# reference={}\n",
            self.testset_id, self.reference
        );
        out.push_str("method,rmse_tau,rmse_ratio,mae_tau,rmse_log,mean_rel_err,flatness,worst_bin_rmse,saturation_frac\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.rmse_tau,
                r.rmse_ratio,
                r.mae_tau,
                r.rmse_log,
                r.mean_rel_err,
                r.flatness,
                r.worst_bin_rmse,
                r.saturation_fraction
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>8}  {:>9}  {:>9}  {:>9}  {:>10}\n",
            "method",
            "rmse_tau",
            format!("/{}", self.reference)
                .chars()
                .take(8)
                .collect::<String>(),
            "rmse_log",
            "rel_err",
            "flatness",
            "worst_bin"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>8.3}  {:>9.4}  {:>9.4}  {:>9.3}  {:>10.4}",
                r.method,
                r.rmse_tau,
                r.rmse_ratio,
                r.rmse_log,
                r.mean_rel_err,
                r.flatness,
                r.worst_bin_rmse
            );
        }
        out
    }
}
