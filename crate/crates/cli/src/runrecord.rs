//! Per-run provenance: resolved config, seed, stage timings and the metric
//! table. One record per command invocation, written as JSON next to the
//! command's outputs. Timings stay out of the metric CSVs so those stay
//! byte-reproducible.

use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Stage name -> wall-clock seconds, in execution order.
    pub timings: Vec<(String, f64)>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        RunRecord {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            timings: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Run a stage, recording its wall-clock time.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("run_record.json"), json)?;
        Ok(())
    }
}

/// Write a metric table as CSV with stable float formatting (shortest
/// round-trip representation).
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
