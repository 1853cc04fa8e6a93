//! `metrics.csv` and `summary.json` writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{PersonalizationSummary, RoundMetrics, RunRecord};
use crate::error::{Error, Result};

/// Formats like C's `%.6g`: six significant digits, trailing zeros removed,
/// scientific notation when the exponent is below -4 or at least 6.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CSV_HEADER: &str =
    "round,selected_clients,global_acc,global_loss,mean_train_loss,elapsed_ms";

pub fn metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rounds.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rounds {
        let ids: Vec<String> = r.selected_clients.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            ids.join(";"),
            fmt_g6(r.global_acc),
            fmt_g6(r.global_loss),
            fmt_g6(r.mean_train_loss),
            r.elapsed_ms
        ));
    }
    out
}

/// On-disk form of a [`RunRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub final_acc: f64,
    pub dropped_samples: usize,
    pub rounds: Vec<RoundMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalization: Option<PersonalizationSummary>,
}

impl RunSummary {
    pub fn from_record(record: &RunRecord) -> Self {
        RunSummary {
            version: record.version.clone(),
            seed: record.config.seed,
            config: record.config.to_pairs(),
            final_acc: record.final_acc,
            dropped_samples: record.dropped_samples,
            rounds: record.rounds.clone(),
            personalization: record.personalization.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("summary.json: {e}")))
    }

    /// Rebuilds the configuration the run was made with.
    pub fn resolved_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_pairs(self.config.clone())
    }
}

pub fn summary_json(record: &RunRecord) -> String {
    let mut s = serde_json::to_string_pretty(&RunSummary::from_record(record))
        .expect("summary is serializable");
    s.push('\n');
    s
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `metrics.csv` and `summary.json` into `outdir`, creating it if needed.
pub fn emit(record: &RunRecord, outdir: &Path) -> Result<()> {
    fs::create_dir_all(outdir)?;
    write_atomic(&outdir.join("metrics.csv"), &metrics_csv(&record.rounds))?;
    write_atomic(&outdir.join("summary.json"), &summary_json(record))?;
    Ok(())
}
