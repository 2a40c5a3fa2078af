//! Grad-CAM files for trained checkpoints.
//!
//! For every (image, class) pair this writes `{id}_{class}_{layer}.png` (the
//! heatmap blended over the image) and a `.json` sidecar with scores, the
//! channel weights and the selected points. A `{id}_selection.tsv` dump of
//! the selector's choices is written once per image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::write_text;
use crate::error::{Error, Result};
use crate::gradcam::{grad_cam, overlay, CamLayer, CamRequest};
use crate::image_io::save_rgb;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::selector::selection_dump;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSidecar {
    pub image_id: String,
    pub layer: String,
    pub class_index: usize,
    pub class: String,
    /// True when the class was given rather than taken from the prediction.
    pub explicit_class: bool,
    pub predicted_index: usize,
    pub predicted_class: String,
    pub scores: Vec<f64>,
    pub channel_weights: Vec<f64>,
    pub source_shape: (usize, usize),
    pub alpha: f64,
    /// `(block, row, col)` of every selected point.
    pub selected: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainFiles {
    pub heatmap: PathBuf,
    pub sidecar: PathBuf,
}

/// One image to explain.
pub struct ExplainInput<'a> {
    pub image_id: &'a str,
    /// `[R, R]` in model units.
    pub model_input: &'a Tensor,
    /// `[R, R]` in `[0, 1]` for the overlay background.
    pub display: &'a Tensor,
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Explains one image for each requested class; `None` means the predicted
/// class. Returns the files written, in request order.
#[allow(clippy::too_many_arguments)]
pub fn explain_image(
    params: &ParamStore,
    model: &ModelConfig,
    classes: &[String],
    input: &ExplainInput<'_>,
    requested: &[Option<usize>],
    layer: CamLayer,
    alpha: f64,
    out_dir: &Path,
) -> Result<Vec<ExplainFiles>> {
    if classes.len() != model.num_classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            classes.len(),
            model.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut dumped = false;
    for &req in requested {
        // The prediction does not depend on the target class, so a probe with
        // class 0 is enough to resolve `None`.
        let class_index = match req {
            Some(c) => c,
            None => grad_cam(params, model, input.model_input, CamRequest { layer, class_index: 0 })?.predicted,
        };
        let cam = grad_cam(params, model, input.model_input, CamRequest { layer, class_index })?;
        let stem = format!(
            "{}_{}_{}",
            file_safe(input.image_id),
            file_safe(&classes[class_index]),
            layer
        );
        let heatmap = out_dir.join(format!("{stem}.png"));
        save_rgb(&heatmap, &overlay(input.display, &cam.heatmap, alpha)?)?;
        let sidecar = ExplainSidecar {
            image_id: input.image_id.into(),
            layer: layer.to_string(),
            class_index,
            class: classes[class_index].clone(),
            explicit_class: req.is_some(),
            predicted_index: cam.predicted,
            predicted_class: classes[cam.predicted].clone(),
            scores: cam.scores.clone(),
            channel_weights: cam.weights.clone(),
            source_shape: cam.heatmap.source_shape,
            alpha,
            selected: cam
                .selections
                .iter()
                .enumerate()
                .flat_map(|(b, s)| s.coords.iter().map(move |&(r, c)| (b, r, c)))
                .collect(),
        };
        let sidecar_path = out_dir.join(format!("{stem}.json"));
        write_text(&sidecar_path, &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
        if !dumped {
            write_text(
                &out_dir.join(format!("{}_selection.tsv", file_safe(input.image_id))),
                &selection_dump(input.image_id, &cam.selections),
            )?;
            dumped = true;
        }
        files.push(ExplainFiles {
            heatmap,
            sidecar: sidecar_path,
        });
    }
    Ok(files)
}
