//! Gradient-weighted class activation maps.
//!
//! Channel weights are the spatial mean of `dz/dB`, the raw map is
//! `ReLU(sum_m v_m B^m)`, normalised by its maximum and resized bilinearly
//! to the image. The target `z` is the combiner's pre-softmax class score.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::NUM_BLOCKS;
use crate::error::{Error, Result};
use crate::image_io::resize_bilinear;
use crate::model::{argmax_rows, forward, ModelConfig};
use crate::params::ParamStore;
use crate::selector::Selection;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Which feature map the map is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSource {
    Backbone,
    Fpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamLayer {
    pub source: LayerSource,
    pub block: usize,
}

impl Default for CamLayer {
    fn default() -> Self {
        Self {
            source: LayerSource::Backbone,
            block: NUM_BLOCKS - 1,
        }
    }
}

impl fmt::Display for CamLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.source {
            LayerSource::Backbone => "backbone",
            LayerSource::Fpn => "fpn",
        };
        write!(f, "{s}{}", self.block)
    }
}

impl FromStr for CamLayer {
    type Err = Error;

    /// `backbone3`, `fpn0`, or a bare block index meaning a backbone block.
    fn from_str(s: &str) -> Result<Self> {
        let (source, rest) = if let Some(r) = s.strip_prefix("backbone") {
            (LayerSource::Backbone, r)
        } else if let Some(r) = s.strip_prefix("fpn") {
            (LayerSource::Fpn, r)
        } else {
            (LayerSource::Backbone, s)
        };
        let block: usize = rest
            .parse()
            .map_err(|_| Error::Config(format!("unknown layer {s:?}, expected e.g. backbone3 or fpn0")))?;
        if block >= NUM_BLOCKS {
            return Err(Error::Config(format!(
                "layer block {block} out of range 0..{NUM_BLOCKS}"
            )));
        }
        Ok(Self { source, block })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamRequest {
    pub layer: CamLayer,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Values in `[0, 1]` at the target extents.
    pub values: Tensor,
    pub source_shape: (usize, usize),
    pub upsampled: (usize, usize),
}

fn check_chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return Err(Error::invalid(op, format!("expected [M, H, W], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// `v_m = mean_{x,y} dz/dB^m_{xy}`.
pub fn channel_weights(activations: &Tensor, output_grad: &Tensor) -> Result<Vec<f64>> {
    let (m, h, w) = check_chw("channel_weights", activations)?;
    if output_grad.shape() != activations.shape() {
        return Err(Error::ShapeMismatch {
            op: "channel_weights",
            lhs: activations.shape().to_vec(),
            rhs: output_grad.shape().to_vec(),
        });
    }
    let p = h * w;
    Ok((0..m)
        .map(|c| output_grad.data()[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64)
        .collect())
}

/// `sum_m v_m B^m` before the ReLU.
pub fn weighted_sum(activations: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (m, h, w) = check_chw("combine", activations)?;
    if weights.len() != m {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: vec![m],
            rhs: vec![weights.len()],
        });
    }
    let p = h * w;
    let mut out = vec![0.0; p];
    for (c, &v) in weights.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(&activations.data()[c * p..(c + 1) * p]) {
            *o += v * a;
        }
    }
    Tensor::new([h, w], out)
}

/// `ReLU(sum_m v_m B^m)`, shape `[H, W]`.
pub fn combine(activations: &Tensor, weights: &[f64]) -> Result<Tensor> {
    Ok(weighted_sum(activations, weights)?.map(|v| v.max(0.0)))
}

/// Divides by the maximum; an all-zero map is returned unchanged.
pub fn normalize(raw: &Tensor) -> Tensor {
    let max = raw.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.map(|v| v.max(0.0) / max)
    } else {
        raw.map(|v| v.max(0.0))
    }
}

pub fn normalize_upsample(raw: &Tensor, target: (usize, usize)) -> Result<Heatmap> {
    if raw.ndim() != 2 {
        return Err(Error::invalid(
            "normalize_upsample",
            format!("expected [H, W], got {:?}", raw.shape()),
        ));
    }
    let source_shape = (raw.shape()[0], raw.shape()[1]);
    if target.0 < source_shape.0 || target.1 < source_shape.1 {
        return Err(Error::invalid(
            "normalize_upsample",
            format!("target {target:?} smaller than source {source_shape:?}"),
        ));
    }
    let values = resize_bilinear(&normalize(raw), target.0, target.1)?;
    Ok(Heatmap {
        values,
        source_shape,
        upsampled: target,
    })
}

/// Piecewise-linear blue (0) to green (0.5) to red (1), channels in `[0, 1]`.
pub fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = v / 0.5;
        [0.0, t, 1.0 - t]
    } else {
        let t = (v - 0.5) / 0.5;
        [t, 1.0 - t, 0.0]
    }
}

/// One blended pixel: zero heat leaves the gray value untouched.
pub fn blend(gray: f64, heat: f64, alpha: f64) -> [u8; 3] {
    let g = gray.clamp(0.0, 1.0);
    let a = if heat > 0.0 { alpha } else { 0.0 };
    ramp(heat).map(|c| ((1.0 - a) * g + a * c).mul_add(255.0, 0.0).round().clamp(0.0, 255.0) as u8)
}

/// Alpha-blends the heatmap's colour ramp over a `[H, W]` grayscale image.
pub fn overlay(image: &Tensor, heatmap: &Heatmap, alpha: f64) -> Result<RgbImage> {
    if image.shape() != heatmap.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: image.shape().to_vec(),
            rhs: heatmap.values.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(blend(image.data()[i], heatmap.values.data()[i], alpha))
    }))
}

#[derive(Debug, Clone)]
pub struct CamResult {
    pub heatmap: Heatmap,
    /// Raw map before normalisation.
    pub raw: Tensor,
    pub weights: Vec<f64>,
    /// Combiner scores for every class.
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub selections: [Selection; NUM_BLOCKS],
}

/// Grad-CAM of one `[R, R]` image (already in model units).
pub fn grad_cam(params: &ParamStore, model: &ModelConfig, image: &Tensor, request: CamRequest) -> Result<CamResult> {
    if request.class_index >= model.num_classes {
        return Err(Error::Config(format!(
            "class {} out of range for {} classes",
            request.class_index, model.num_classes
        )));
    }
    let r = model.backbone.input_resolution;
    if image.shape() != [r, r] {
        return Err(Error::Data(format!(
            "image is {:?}, model expects {r}x{r}",
            image.shape()
        )));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let input = tape.constant(image.clone().reshape([1, 1, r, r])?);
    let out = forward(&bound, input, model)?;
    let maps = match request.layer.source {
        LayerSource::Backbone => out.backbone,
        LayerSource::Fpn => out.projected,
    };
    let target = maps.maps[request.layer.block];
    let z = out.combiner_scores.take(&[request.class_index])?.sum_all();
    let grads = tape.backward(z)?;
    let shape = target.shape();
    let chw = [shape[1], shape[2], shape[3]];
    let activations = target.value().clone().reshape(chw)?;
    let grad = grads.wrt(target).reshape(chw)?;
    let weights = channel_weights(&activations, &grad)?;
    let raw = combine(&activations, &weights)?;
    let heatmap = normalize_upsample(&raw, (r, r))?;
    let scores = out.combiner_scores.value().data().to_vec();
    let predicted = argmax_rows(&out.combiner_scores.value())[0];
    let selections = out.selections.into_iter().next().expect("one image");
    Ok(CamResult {
        heatmap,
        raw,
        weights,
        scores,
        predicted,
        selections,
    })
}

/// Row-major position of the largest heatmap value (first on ties).
pub fn argmax_position(map: &Tensor) -> (usize, usize) {
    let w = map.shape()[1];
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn chw(m: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new([m, h, w], (0..m * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn weights_from_analytic_targets() {
        let act = chw(3, 2, 3, |i| (i as f64 * 0.37).sin());
        let tape = Tape::new();
        let b = tape.leaf(act.clone());
        let z = b.take(&(6..12).collect::<Vec<_>>()).unwrap().sum_all();
        let g = tape.backward(z).unwrap().wrt(b);
        let v = channel_weights(&act, &g).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);

        let z = b.take(&(6..12).collect::<Vec<_>>()).unwrap().mean_all();
        let g = tape.backward(z).unwrap().wrt(b);
        let v = channel_weights(&act, &g).unwrap();
        assert!((v[1] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(channel_weights(&act, &Tensor::zeros([3, 2, 3])).unwrap(), vec![0.0; 3]);
        assert!(channel_weights(&act, &Tensor::zeros([3, 3, 2])).is_err());
    }

    #[test]
    fn combine_examples() {
        let act = chw(2, 1, 2, |i| [-2.0, 3.0, 5.0, 7.0][i]);
        assert_eq!(combine(&act, &[0.0, 0.0]).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(combine(&act, &[1.0, 0.0]).unwrap().data(), &[0.0, 3.0]);
        let pos = chw(1, 2, 2, |i| i as f64);
        assert_eq!(combine(&pos, &[1.0]).unwrap().data(), pos.data());
        assert!(combine(&act, &[1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let h = normalize_upsample(&Tensor::full([2, 2], 3.0), (5, 5)).unwrap();
        assert!(h.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let z = normalize_upsample(&Tensor::zeros([2, 2]), (4, 4)).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        let m = normalize_upsample(&Tensor::from_rows(&[&[0.0, 2.0], &[0.0, 2.0]]), (4, 4)).unwrap();
        for y in 0..4 {
            for (x, want) in [0.0, 0.25, 0.75, 1.0].iter().enumerate() {
                assert!((m.values.data()[y * 4 + x] - want).abs() < 1e-12);
            }
        }
        assert!(normalize_upsample(&Tensor::zeros([4, 4]), (2, 2)).is_err());
    }

    #[test]
    fn positive_weight_scaling_leaves_heatmap_unchanged() {
        let act = chw(3, 3, 3, |i| ((i * 7) % 5) as f64 - 1.5);
        let w = [0.3, -0.2, 0.9];
        let a = normalize(&combine(&act, &w).unwrap());
        let b = normalize(&combine(&act, &w.map(|v| v * 4.5)).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn overlay_examples() {
        let img = Tensor::new([2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let zero = normalize_upsample(&Tensor::zeros([1, 1]), (2, 2)).unwrap();
        let out = overlay(&img, &zero, DEFAULT_ALPHA).unwrap();
        for (i, p) in out.pixels().enumerate() {
            let g = (img.data()[i] * 255.0).round() as u8;
            assert_eq!(p.0, [g, g, g]);
        }
        let ones = normalize_upsample(&Tensor::full([1, 1], 2.0), (2, 2)).unwrap();
        let out = overlay(&Tensor::full([2, 2], 0.5), &ones, DEFAULT_ALPHA).unwrap();
        let red = [(0.6f64 * 0.5 + 0.4) * 255.0, 0.6 * 0.5 * 255.0, 0.6 * 0.5 * 255.0].map(|v| v.round() as u8);
        assert!(out.pixels().all(|p| p.0 == red));
        assert_eq!(ramp(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(ramp(0.0), [0.0, 0.0, 1.0]);
        assert!(overlay(&Tensor::zeros([3, 3]), &ones, 0.4).is_err());
    }

    #[test]
    fn layer_names_parse() {
        assert_eq!("backbone3".parse::<CamLayer>().unwrap(), CamLayer::default());
        let f: CamLayer = "fpn1".parse().unwrap();
        assert_eq!(
            (f.source, f.block, f.to_string()),
            (LayerSource::Fpn, 1, "fpn1".to_string())
        );
        assert_eq!("2".parse::<CamLayer>().unwrap().block, 2);
        assert!("fpn9".parse::<CamLayer>().is_err());
        assert!("conv".parse::<CamLayer>().is_err());
    }
}
