//! Metrics log as JSON lines: one object per row, keys in declaration
//! order, floats printed with 17 significant digits so reruns of a
//! deterministic experiment produce byte-identical logs.

use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRow;

/// `{:.16e}` keeps 17 significant digits — enough to round-trip any f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_row(row: &MetricsRow) -> String {
    format!(
        "{{\"step\":{},\"cond_loglik\":{},\"classifier_conf\":{},\"spread_ratio\":{},\
         \"churn\":{},\"mode_agreement\":{},\"wgan_value\":{}}}",
        row.step,
        fmt_f64(row.cond_loglik),
        fmt_f64(row.classifier_conf),
        fmt_f64(row.spread_ratio),
        fmt_f64(row.churn),
        fmt_f64(row.mode_agreement),
        fmt_f64(row.wgan_value),
    )
}

pub fn write_jsonl(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(line).map_err(|e| {
            HarnessError::Config(format!(
                "{}:{}: bad metrics row: {e}",
                path.display(),
                i + 1
            ))
        })?;
        rows.push(row);
    }
    Ok(rows)
}
