//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::metrics::MetricsReport;
use crate::autodiff::Tape;
use crate::checkpoint::ArrayFile;
use crate::combiner::LossReport;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::params::ParamStore;
use crate::rng;

/// One optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub block_losses: [f64; 4],
    pub combiner_loss: f64,
    pub total: f64,
}

/// Summary of one epoch. Train figures are accumulated over the epoch's
/// batches, before each batch's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// A line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    pub final_params: ParamStore,
    /// Parameters at the epoch with the best validation accuracy, or the
    /// final parameters without a validation set.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub optimizer_state: ArrayFile,
}

impl TrainOutcome {
    pub fn log(&self) -> Vec<LogRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + self.epochs.len());
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                out.push(LogRecord::Step(s.clone()));
            }
            out.push(LogRecord::Epoch(e.clone()));
        }
        out
    }

    /// JSON lines, one record per line.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut text = String::new();
        for r in self.log() {
            text.push_str(&serde_json::to_string(&r)?);
            text.push('\n');
        }
        Ok(text)
    }
}

fn check_dataset(data: &Dataset, model: &ModelConfig, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if data.classes.len() != model.num_classes {
        return Err(Error::Data(format!(
            "{what} split has {} classes, model expects {}",
            data.classes.len(),
            model.num_classes
        )));
    }
    let r = data.resolution()?;
    if r != model.backbone.input_resolution {
        return Err(Error::Data(format!(
            "{what} images are {r}px, configured resolution is {}",
            model.backbone.input_resolution
        )));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, train_set: &Dataset, val_set: Option<&Dataset>) -> Result<TrainOutcome> {
    let model = cfg.model_config(train_set.classes.len());
    cfg.validate(train_set.classes.len())?;
    check_dataset(train_set, &model, "train")?;
    if let Some(v) = val_set {
        check_dataset(v, &model, "val")?;
    }
    let mut params = model.init_params(cfg.seed)?;
    let mut optimizer = cfg.optimizer.build()?;
    let labels = train_set.labels();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "train.shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let out = forward(&bound, tape.constant(batch), &model)?;
            let (loss, report) = out.loss(&batch_labels, &model.loss_weights)?;
            correct += out
                .predictions()
                .iter()
                .zip(&batch_labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = bound.grads(&tape.backward(loss)?);
            optimizer.step(&mut params, &grads)?;
            loss_sum += report.total * chunk.len() as f64;
            steps.push(step_record(epoch, step, &report));
            step += 1;
        }
        let (val_loss, val_accuracy) = match val_set {
            Some(v) => {
                let (report, loss) = evaluate(&params, &model, v, cfg.batch_size)?;
                (Some(loss), Some(report.accuracy))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}{}",
            record.train_loss,
            record.train_accuracy,
            val_accuracy.map_or(String::new(), |a| format!(", val acc {a:.3}"))
        );
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            }
        }
        epochs.push(record);
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs - 1, params.clone()),
    };
    let mut optimizer_state = ArrayFile::new();
    optimizer.save_state(&mut optimizer_state)?;
    Ok(TrainOutcome {
        model,
        final_params: params,
        best_params,
        best_epoch,
        epochs,
        steps,
        optimizer_state,
    })
}

fn step_record(epoch: usize, step: usize, r: &LossReport) -> StepRecord {
    StepRecord {
        epoch,
        step,
        block_losses: r.block_losses,
        combiner_loss: r.combiner_loss,
        total: r.total,
    }
}

/// Metrics and mean total loss of `params` on `data`.
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<(MetricsReport, f64)> {
    check_dataset(data, model, "evaluation")?;
    let labels = data.labels();
    let mut predicted = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let out = forward(&bound, tape.constant(data.batch(chunk)?), model)?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (_, report) = out.loss(&batch_labels, &model.loss_weights)?;
        loss_sum += report.total * chunk.len() as f64;
        predicted.extend(out.predictions());
    }
    let report = MetricsReport::from_predictions(&data.classes, &labels, &predicted)?;
    Ok((report, loss_sum / data.len() as f64))
}
