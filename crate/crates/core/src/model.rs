//! The assembled network: backbone, FPN, per-block selector and the graph
//! combiner, with the training loss and batched inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::backbone::{backbone_forward, fpn_project, BackboneConfig, FeatureMapSet, FpnConfig, NUM_BLOCKS};
use crate::combiner::{combine_losses, cross_entropy_rows, gcn_fuse, GcnConfig, GcnWeights, LossReport, LossWeights};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng;
use crate::selector::{self, pixel_confidence, select, PixelLogits, Selection, SelectionConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub selection: SelectionConfig,
    #[serde(default)]
    pub gcn: GcnConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Inputs enter the network as `(x - input_center) * input_scale`.
    #[serde(default = "default_center")]
    pub input_center: f64,
    #[serde(default = "default_scale")]
    pub input_scale: f64,
}

fn default_center() -> f64 {
    0.5
}

fn default_scale() -> f64 {
    2.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            backbone: BackboneConfig::default(),
            fpn: FpnConfig::default(),
            selection: SelectionConfig::default(),
            gcn: GcnConfig::default(),
            loss_weights: LossWeights::default(),
            input_center: default_center(),
            input_scale: default_scale(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the synthetic experiments.
    pub fn toy(num_classes: usize, resolution: usize) -> Self {
        Self {
            num_classes,
            backbone: BackboneConfig {
                input_resolution: resolution,
                block_channels: [16, 32, 32, 32],
                block_strides: [2, 2, 2, 2],
                conv_kernel: 3,
            },
            fpn: FpnConfig { fpn_size: 32 },
            selection: SelectionConfig { n_sel: [32, 16, 8, 4] },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale != 0.0 && self.input_center.is_finite()) {
            return Err(Error::Config(
                "input_center and input_scale must be finite, scale non-zero".into(),
            ));
        }
        self.backbone.validate()?;
        self.fpn.validate(self.num_classes)?;
        self.selection.validate()?;
        self.gcn.validate()?;
        let total: usize = self.resolved_n_sel().iter().sum();
        if total < self.gcn.num_supernodes {
            return Err(Error::Config(format!(
                "{total} selected points cannot fill {} supernodes",
                self.gcn.num_supernodes
            )));
        }
        Ok(())
    }

    /// Selection counts after clamping to the feature-map sizes.
    pub fn resolved_n_sel(&self) -> [usize; NUM_BLOCKS] {
        let shapes = self.backbone.output_shapes();
        self.selection
            .resolve(std::array::from_fn(|b| (shapes[b].1, shapes[b].2)))
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "init.backbone");
        self.backbone.init_params(&mut store, &mut rng);
        let mut rng = rng::stream(seed, "init.fpn");
        self.fpn.init_params(&self.backbone, &mut store, &mut rng);
        let mut rng = rng::stream(seed, "init.selector");
        selector::init_params(self.fpn.fpn_size, self.num_classes, &mut store, &mut rng);
        let mut rng = rng::stream(seed, "init.combiner");
        self.gcn.init_params(self.num_classes, &mut store, &mut rng);
        Ok(store)
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput<'t> {
    /// Raw backbone block outputs.
    pub backbone: FeatureMapSet<'t>,
    pub projected: FeatureMapSet<'t>,
    /// Per block, `[N*H*W, C']` pixel logits, image-major.
    pub pixel_rows: [Var<'t>; NUM_BLOCKS],
    /// Per block, `[N, C']` logits averaged over positions.
    pub block_scores: [Var<'t>; NUM_BLOCKS],
    /// `[N, C']` combiner scores.
    pub combiner_scores: Var<'t>,
    /// Per image, the selection of every block.
    pub selections: Vec<[Selection; NUM_BLOCKS]>,
    spatial: [(usize, usize); NUM_BLOCKS],
    classes: usize,
}

impl<'t> ForwardOutput<'t> {
    pub fn batch_size(&self) -> usize {
        self.selections.len()
    }

    /// Pixel logits of one image and block.
    pub fn pixel_logits(&self, image: usize, block: usize) -> Result<PixelLogits<'t>> {
        let (h, w) = self.spatial[block];
        let idx: Vec<usize> = (image * h * w..(image + 1) * h * w).collect();
        Ok(PixelLogits {
            height: h,
            width: w,
            classes: self.classes,
            logits: self.pixel_rows[block].gather(&idx)?,
        })
    }

    /// Argmax of the combiner scores per image.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.combiner_scores.value())
    }

    /// Batch-mean losses of the four blocks and the combiner.
    pub fn loss(&self, labels: &[usize], weights: &LossWeights) -> Result<(Var<'t>, LossReport)> {
        let mut terms = Vec::with_capacity(NUM_BLOCKS);
        for &s in &self.block_scores {
            terms.push(cross_entropy_rows(s, labels)?);
        }
        let terms: [Var<'t>; NUM_BLOCKS] = terms.try_into().expect("four blocks");
        combine_losses(terms, cross_entropy_rows(self.combiner_scores, labels)?, weights)
    }
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let c = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Forward pass over a batch `[N, 1, R, R]`.
pub fn forward<'t>(params: &BoundParams<'t>, batch: Var<'t>, config: &ModelConfig) -> Result<ForwardOutput<'t>> {
    let input = batch.add_scalar(-config.input_center).scale(config.input_scale);
    let backbone = backbone_forward(params, input, &config.backbone)?;
    let projected = fpn_project(params, &backbone, &config.fpn)?;
    let n = batch.shape()[0];
    let classes = config.num_classes;
    let n_sel = config.resolved_n_sel();
    let gcn = GcnWeights::bind(params, &config.gcn)?;

    let mut pixel_rows = Vec::with_capacity(NUM_BLOCKS);
    let mut block_scores = Vec::with_capacity(NUM_BLOCKS);
    let mut spatial = [(0, 0); NUM_BLOCKS];
    for (b, &fmap) in projected.maps.iter().enumerate() {
        let s = fmap.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        spatial[b] = (h, w);
        let (weight, bias) = selector::block_weights(params, b)?;
        let rows = fmap
            .permute(&[0, 2, 3, 1])?
            .reshape(&[n * h * w, c])?
            .matmul(weight.t()?)?
            .add_bias(bias)?;
        block_scores.push(rows.reshape(&[n, h * w, classes])?.mean(1)?);
        pixel_rows.push(rows);
    }

    let mut selections = Vec::with_capacity(n);
    let mut fused = Vec::with_capacity(n);
    for i in 0..n {
        let mut sels = Vec::with_capacity(NUM_BLOCKS);
        let mut parts = Vec::with_capacity(NUM_BLOCKS);
        for b in 0..NUM_BLOCKS {
            let (h, w) = spatial[b];
            let sel = {
                let rows = pixel_rows[b].value();
                let slice = &rows.data()[i * h * w * classes..(i + 1) * h * w * classes];
                let conf = pixel_confidence_slice(slice, h, w, classes);
                select(&conf, n_sel[b])?
            };
            let offset: Vec<usize> = sel.indices.iter().map(|&p| i * h * w + p).collect();
            parts.push(pixel_rows[b].gather(&offset)?);
            sels.push(sel);
        }
        let nodes = concat(&parts)?;
        fused.push(gcn_fuse(nodes, &config.gcn, &gcn)?.reshape(&[1, classes])?);
        selections.push(sels.try_into().expect("four blocks"));
    }
    Ok(ForwardOutput {
        backbone,
        projected,
        pixel_rows: pixel_rows.try_into().expect("four blocks"),
        block_scores: block_scores.try_into().expect("four blocks"),
        combiner_scores: concat(&fused)?,
        selections,
        spatial,
        classes,
    })
}

fn pixel_confidence_slice(rows: &[f64], h: usize, w: usize, classes: usize) -> Tensor {
    let tape = Tape::new();
    let pl = PixelLogits {
        height: h,
        width: w,
        classes,
        logits: tape.constant(Tensor::new([h * w, classes], rows.to_vec()).expect("slice shape")),
    };
    pixel_confidence(&pl)
}

/// Stacks single-channel images `[R, R]` into a batch `[N, 1, R, R]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("stack_images", "empty batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "stack_images",
            format!("expected [R, R], got {shape:?}"),
        ));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), 1, shape[0], shape[1]], data)
}

/// Combiner scores `[N, C']` and argmax predictions without recording gradients.
pub fn predict(params: &ParamStore, config: &ModelConfig, batch: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = forward(&bound, tape.constant(batch.clone()), config)?;
    let scores = out.combiner_scores.value().clone();
    let preds = argmax_rows(&scores);
    Ok((scores, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::block_loss;
    use rand::Rng as _;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            backbone: BackboneConfig {
                input_resolution: 8,
                block_channels: [2, 3, 3, 2],
                block_strides: [1, 2, 2, 2],
                conv_kernel: 3,
            },
            fpn: FpnConfig { fpn_size: 3 },
            selection: SelectionConfig { n_sel: [6, 3, 2, 1] },
            gcn: GcnConfig {
                num_supernodes: 2,
                ..GcnConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize, r: usize, seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "model-test");
        Tensor::new([n, 1, r, r], (0..n * r * r).map(|_| g.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_counts() {
        let cfg = tiny();
        let params = cfg.init_params(1).unwrap();
        let tape = Tape::new();
        let out = forward(&params.bind(&tape), tape.constant(batch(3, 8, 2)), &cfg).unwrap();
        assert_eq!(out.combiner_scores.shape(), vec![3, 2]);
        for b in 0..NUM_BLOCKS {
            assert_eq!(out.block_scores[b].shape(), vec![3, 2]);
        }
        for sels in &out.selections {
            let counts: Vec<usize> = sels.iter().map(|s| s.indices.len()).collect();
            assert_eq!(counts, vec![6, 3, 2, 1]);
        }
        assert_eq!(out.predictions().len(), 3);
    }

    #[test]
    fn batched_loss_matches_per_image_total() {
        let cfg = tiny();
        let params = cfg.init_params(3).unwrap();
        let x = batch(2, 8, 4);
        let labels = [1, 0];
        let tape = Tape::new();
        let out = forward(&params.bind(&tape), tape.constant(x.clone()), &cfg).unwrap();
        let (_, batched) = out.loss(&labels, &LossWeights::default()).unwrap();

        let mut sum = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let single = Tensor::new([1, 1, 8, 8], x.data()[i * 64..(i + 1) * 64].to_vec()).unwrap();
            let t = Tape::new();
            let o = forward(&params.bind_frozen(&t), t.constant(single), &cfg).unwrap();
            let blocks: [PixelLogits; NUM_BLOCKS] = std::array::from_fn(|b| o.pixel_logits(0, b).unwrap());
            let comb = o.combiner_scores.reshape(&[2]).unwrap();
            let (_, r) = crate::combiner::total_loss(&blocks, comb, l, &LossWeights::default()).unwrap();
            assert!((r.combiner_loss - block_loss(comb, l).unwrap().value().item()).abs() < 1e-12);
            sum += r.total;
        }
        assert!((batched.total - sum / 2.0).abs() < 1e-10);
    }

    #[test]
    fn selection_is_top_confidence_per_image() {
        let cfg = tiny();
        let params = cfg.init_params(5).unwrap();
        let tape = Tape::new();
        let out = forward(&params.bind_frozen(&tape), tape.constant(batch(2, 8, 6)), &cfg).unwrap();
        for i in 0..2 {
            for b in 0..NUM_BLOCKS {
                let pl = out.pixel_logits(i, b).unwrap();
                let want = select(&pixel_confidence(&pl), cfg.resolved_n_sel()[b]).unwrap();
                assert_eq!(out.selections[i][b], want);
            }
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = tiny();
        let params = cfg.init_params(7).unwrap();
        let x = batch(4, 8, 8);
        let (s1, p1) = predict(&params, &cfg, &x).unwrap();
        let (s2, p2) = predict(&params, &cfg, &x).unwrap();
        assert_eq!(p1, p2);
        assert!(s1.data().iter().zip(s2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p1, argmax_rows(&s1));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.gcn.num_supernodes = 100;
        assert!(cfg.validate().is_err());
        let toy = ModelConfig::toy(4, 64);
        toy.validate().unwrap();
        assert_eq!(toy.resolved_n_sel(), [32, 16, 8, 4]);
        assert_eq!(ModelConfig::default().resolved_n_sel(), [1024, 256, 64, 16]);
    }
}
