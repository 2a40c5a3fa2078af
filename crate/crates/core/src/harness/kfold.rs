//! Stratified K-fold cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::train::{evaluate, train};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Assigns every example to one of `k` folds. Augmentation families
/// (`Example::group`) stay together; within a class, families go to the fold
/// holding the fewest examples of that class, ties broken by overall fold
/// size and then index. With singleton families the per-class fold sizes
/// differ by at most one.
pub fn stratified_folds(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut per_class: Vec<BTreeMap<&str, Vec<usize>>> = vec![BTreeMap::new(); data.classes.len()];
    for (i, e) in data.examples.iter().enumerate() {
        per_class[e.label].entry(e.group.as_str()).or_default().push(i);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, groups) in per_class.into_iter().enumerate() {
        if groups.is_empty() {
            continue;
        }
        if groups.len() < k {
            return Err(Error::Data(format!(
                "class {} has {} groups, fewer than k = {k}",
                data.classes[class],
                groups.len()
            )));
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut stream(seed, &format!("kfold.{class}")));
        let mut class_sizes = vec![0usize; k];
        for g in groups {
            let f = (0..k)
                .min_by_key(|&f| (class_sizes[f], folds[f].len(), f))
                .expect("k >= 2");
            class_sizes[f] += g.len();
            folds[f].extend(g);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub k: usize,
    pub epochs_per_fold: usize,
    /// Which parameters score each fold.
    pub checkpoint: String,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl KFoldReport {
    pub fn from_folds(k: usize, epochs_per_fold: usize, checkpoint: &str, folds: Vec<FoldResult>) -> Self {
        let n = folds.len() as f64;
        let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
        let var = folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / n;
        Self {
            k,
            epochs_per_fold,
            checkpoint: checkpoint.into(),
            folds,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "# {}-fold cross-validation, {} epochs per fold, scored at the {}\nfold\ttrain\tval\taccuracy\n",
            self.k, self.epochs_per_fold, self.checkpoint
        );
        for f in &self.folds {
            s += &format!("{}\t{}\t{}\t{:.4}\n", f.fold, f.train_size, f.val_size, f.accuracy);
        }
        s += &format!("mean\t\t\t{:.4}\nstd\t\t\t{:.4}\n", self.mean, self.std);
        s
    }
}

/// Runs `score(train, val)` on every fold.
pub fn kfold_with(
    data: &Dataset,
    k: usize,
    seed: u64,
    mut score: impl FnMut(usize, &Dataset, &Dataset) -> Result<f64>,
) -> Result<Vec<FoldResult>> {
    let folds = stratified_folds(data, k, seed)?;
    let mut out = Vec::with_capacity(k);
    for (i, val_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let (tr, va) = (data.subset(&train_idx), data.subset(val_idx));
        let accuracy = score(i, &tr, &va)?;
        log::info!("fold {i}: accuracy {accuracy:.4}");
        out.push(FoldResult {
            fold: i,
            train_size: tr.len(),
            val_size: va.len(),
            accuracy,
        });
    }
    Ok(out)
}

/// Trains `epochs_per_fold` epochs per fold and scores the final parameters.
pub fn kfold(cfg: &RunConfig, data: &Dataset, k: usize, epochs_per_fold: usize) -> Result<KFoldReport> {
    let fold_cfg = RunConfig {
        epochs: epochs_per_fold,
        ..cfg.clone()
    };
    let folds = kfold_with(data, k, cfg.seed, |_, tr, va| {
        let out = train(&fold_cfg, tr, None)?;
        Ok(evaluate(&out.final_params, &out.model, va, fold_cfg.batch_size)?
            .0
            .accuracy)
    })?;
    Ok(KFoldReport::from_folds(k, epochs_per_fold, "final epoch", folds))
}

/// Accuracy of always predicting `class`.
pub fn constant_classifier_accuracy(class: usize, data: &Dataset) -> f64 {
    data.examples.iter().filter(|e| e.label == class).count() as f64 / data.len() as f64
}
