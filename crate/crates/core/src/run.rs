//! Run artifacts: checkpoint, metric log, and manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::write_container;
use crate::error::{ensure, Result, TpaError};
use crate::pipeline::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_tri: f64,
    pub loss_total: f64,
    pub rank1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub metrics: Vec<MetricRow>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.tnsc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";

/// CSV text of the metric log; floats use the shortest round-trip form.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss_cls,loss_tri,loss_total,rank1\n");
    for r in rows {
        let rank1 = r.rank1.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(out, "{},{:?},{:?},{:?},{}", r.step, r.loss_cls, r.loss_tri, r.loss_total, rank1)
            .expect("writing to a string");
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TpaError::io(path, e))
}

impl RunManifest {
    /// Writes the manifest as JSON after checking that every artifact exists.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for a in &self.artifacts {
            ensure!(dir.join(a).exists(), "manifest references missing artifact {a}");
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TpaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TpaError::domain(format!("bad manifest {}: {e}", path.display())))
    }
}

/// Saves checkpoint, configuration, metric log, and manifest into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, model: &ModelParams, log: &[MetricRow]) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| TpaError::io(dir, e))?;
    write_container(&model.to_tensor_map(), &dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    write(&dir.join(METRICS_FILE), metrics_csv(log).as_bytes())?;
    let manifest = RunManifest {
        config: cfg.to_map(),
        seed: cfg.seed,
        artifacts: vec![CHECKPOINT_FILE.into(), CONFIG_FILE.into(), METRICS_FILE.into()],
        metrics: log.to_vec(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}
