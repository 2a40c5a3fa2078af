//! On-disk layout of a training run:
//!
//! ```text
//! {out}/model.ckpt        best params under `model.`, final under `final.`, optimizer state under `optim.`
//! {out}/model.json        model configuration, class names, best epoch
//! {out}/run_config.toml   the run configuration as used
//! {out}/train_log.jsonl   per-step and per-epoch records
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::MetricsReport;
use super::train::TrainOutcome;
use crate::checkpoint::ArrayFile;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_FILE: &str = "model.json";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub best_epoch: usize,
}

/// A loaded run: which parameters to use is up to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub info: ModelInfo,
    pub best: ParamStore,
    pub last: ParamStore,
    pub optimizer_state: ArrayFile,
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_run(dir: &Path, cfg: &RunConfig, classes: &[String], outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ckpt = ArrayFile::new();
    ckpt.push_params("model.", &outcome.best_params)?;
    ckpt.push_params("final.", &outcome.final_params)?;
    for (name, t) in outcome.optimizer_state.iter() {
        ckpt.push(name, t.clone())?;
    }
    ckpt.write(dir.join(CHECKPOINT_FILE))?;
    let info = ModelInfo {
        model: outcome.model.clone(),
        classes: classes.to_vec(),
        best_epoch: outcome.best_epoch,
    };
    write_text(&dir.join(MODEL_FILE), &(serde_json::to_string_pretty(&info)? + "\n"))?;
    write_text(&dir.join(RUN_CONFIG_FILE), &cfg.to_toml()?)?;
    write_text(&dir.join(TRAIN_LOG_FILE), &outcome.log_jsonl()?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let info_path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: ModelInfo = serde_json::from_str(&text)?;
    let ckpt = ArrayFile::read(dir.join(CHECKPOINT_FILE))?;
    let best = ckpt.params_with_prefix("model.");
    if best.is_empty() {
        return Err(Error::Data(format!("{} holds no model parameters", dir.display())));
    }
    let last = ckpt.params_with_prefix("final.");
    let mut optimizer_state = ArrayFile::new();
    for (name, t) in ckpt.iter().filter(|(n, _)| n.starts_with("optim.")) {
        optimizer_state.push(name, t.clone())?;
    }
    Ok(Checkpoint {
        info,
        best,
        last,
        optimizer_state,
    })
}

/// Writes `{name}_metrics.json` and `{name}_confusion.csv`.
pub fn write_report(dir: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(
        &dir.join(format!("{name}_metrics.json")),
        &(serde_json::to_string_pretty(report)? + "\n"),
    )?;
    let names: Vec<String> = report.per_class.iter().map(|c| c.class.clone()).collect();
    write_text(
        &dir.join(format!("{name}_confusion.csv")),
        &report.confusion.to_csv(&names)?,
    )
}
