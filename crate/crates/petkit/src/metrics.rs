//! Metrics and report files.
//!
//! `metrics.csv` holds one row per epoch under a single timestamp header
//! line; `summary.json` / `report.json` are pretty-printed with the
//! timestamp isolated in its own field. Apart from those timestamp lines,
//! reruns of a deterministic command produce byte-identical outputs. All
//! numbers are printed with six significant digits.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use petkit_core::tuning::EpochStats;
use serde::Serialize;

use crate::Result;

/// Six significant digits; plain decimal in a readable range, scientific
/// outside it.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

pub fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes per-epoch metrics as CSV. The timestamp is confined to the first
/// (comment) line.
pub fn write_metrics_csv(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# generated_unix {}\n", unix_timestamp()));
    out.push_str("epoch,lr,train_loss,val_accuracy\n");
    for e in epochs {
        let val = e
            .val_accuracy
            .map(|v| sig6(v))
            .unwrap_or_else(|| "".to_string());
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            sig6(e.lr),
            sig6(e.train_loss),
            val
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Serializes a report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
