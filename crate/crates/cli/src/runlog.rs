//! Newline-delimited JSON training log, one record per epoch.

use std::path::Path;

use fisherlda_core::trainer::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    epoch: usize,
    loss: f64,
    lr: f64,
    eigenvalues: Vec<f64>,
    eta: Option<f64>,
}

pub fn to_ndjson(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in log {
        let line = Line {
            epoch: r.epoch,
            loss: r.loss,
            lr: r.lr,
            eigenvalues: r.eigenvalues.clone(),
            eta: r.eta,
        };
        out.push_str(&serde_json::to_string(&line).expect("log record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_ndjson(text: &str, path: &Path) -> Result<Vec<EpochRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: Line = serde_json::from_str(l)
                .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
            Ok(EpochRecord {
                epoch: line.epoch,
                loss: line.loss,
                lr: line.lr,
                eigenvalues: line.eigenvalues,
                eta: line.eta,
            })
        })
        .collect()
}

pub fn write(path: &Path, log: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, to_ndjson(log)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_ndjson(&text, path)
}
