//! Weakly supervised selector: a per-block linear classifier scores every
//! feature point, the softmax maximum is its confidence, and the `k` most
//! confident points per block are kept.
//!
//! Pixel logits are stored position-major, `[H*W, C']`, so that a selection
//! is a plain row gather.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::backbone::NUM_BLOCKS;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{argsort_desc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_sel: [usize; NUM_BLOCKS],
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_sel: [2048, 512, 128, 32],
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sel.contains(&0) {
            return Err(Error::Config(format!(
                "n_sel entries must be positive: {:?}",
                self.n_sel
            )));
        }
        Ok(())
    }

    /// Per-block counts for the given spatial extents. Counts larger than the
    /// map are clamped to `H*W` with a warning.
    pub fn resolve(&self, spatial: [(usize, usize); NUM_BLOCKS]) -> [usize; NUM_BLOCKS] {
        std::array::from_fn(|b| {
            let (h, w) = spatial[b];
            let n = self.n_sel[b];
            if n > h * w {
                log::warn!(
                    "block {b}: n_sel {n} exceeds {h}x{w} feature points, clamped to {}",
                    h * w
                );
                h * w
            } else {
                n
            }
        })
    }
}

/// Classifier weights `[C', C]` (out x in) and bias `[C']` per block.
pub fn init_params(fpn_size: usize, num_classes: usize, store: &mut ParamStore, rng: &mut Rng) {
    for b in 0..NUM_BLOCKS {
        store.init_he(
            format!("selector.block{b}.weight"),
            &[num_classes, fpn_size],
            fpn_size,
            rng,
        );
        store.insert(format!("selector.block{b}.bias"), Tensor::zeros([num_classes]));
    }
}

/// Per-pixel class logits of one image and block.
#[derive(Debug, Clone, Copy)]
pub struct PixelLogits<'t> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// `[H*W, C']`, row `y*W + x`.
    pub logits: Var<'t>,
}

impl PixelLogits<'_> {
    pub fn at(&self, class: usize, row: usize, col: usize) -> f64 {
        self.logits.value().data()[(row * self.width + col) * self.classes + class]
    }
}

/// Applies the block classifier to a batch `[N, C, H, W]`, one `PixelLogits`
/// per image.
pub fn classify_pixels_batch<'t>(fmap: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Vec<PixelLogits<'t>>> {
    let s = fmap.shape();
    if s.len() != 4 {
        return Err(Error::invalid("classify_pixels", format!("expected NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != c {
        return Err(Error::ShapeMismatch {
            op: "classify_pixels",
            lhs: vec![c],
            rhs: ws,
        });
    }
    let classes = ws[0];
    let rows = fmap
        .permute(&[0, 2, 3, 1])?
        .reshape(&[n * h * w, c])?
        .matmul(weight.t()?)?
        .add_bias(bias)?;
    (0..n)
        .map(|i| {
            let idx: Vec<usize> = (i * h * w..(i + 1) * h * w).collect();
            let logits = if n == 1 { rows } else { rows.gather(&idx)? };
            Ok(PixelLogits {
                height: h,
                width: w,
                classes,
                logits,
            })
        })
        .collect()
}

/// Single-image form: `fmap` is `[C, H, W]`.
pub fn classify_pixels<'t>(fmap: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<PixelLogits<'t>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::invalid("classify_pixels", format!("expected CHW, got {s:?}")));
    }
    let batch = fmap.reshape(&[1, s[0], s[1], s[2]])?;
    Ok(classify_pixels_batch(batch, weight, bias)?.remove(0))
}

/// Max-over-classes softmax probability per position, `[H, W]`.
pub fn pixel_confidence(logits: &PixelLogits<'_>) -> Tensor {
    let v = logits.logits.value();
    let conf = v
        .data()
        .chunks(logits.classes)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|&x| (x - max).exp()).sum::<f64>()
        })
        .collect();
    Tensor::new([logits.height, logits.width], conf).expect("confidence shape")
}

/// Selected positions before their features are gathered.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Flat `y*W + x` positions, most confident first.
    pub indices: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    pub confidences: Vec<f64>,
}

/// Top-`k` positions of a `[H, W]` confidence map by stable descending sort.
pub fn select(conf: &Tensor, k: usize) -> Result<Selection> {
    if conf.ndim() != 2 {
        return Err(Error::invalid(
            "select",
            format!("expected [H, W], got {:?}", conf.shape()),
        ));
    }
    let width = conf.shape()[1];
    if k > conf.numel() {
        return Err(Error::invalid(
            "select",
            format!("k = {k} exceeds {} feature points", conf.numel()),
        ));
    }
    let mut indices = argsort_desc(conf.data());
    indices.truncate(k);
    Ok(Selection {
        coords: indices.iter().map(|&i| (i / width, i % width)).collect(),
        confidences: indices.iter().map(|&i| conf.data()[i]).collect(),
        indices,
    })
}

/// Selected points with their gathered logits `f'_i`.
#[derive(Debug, Clone)]
pub struct SelectedPoints<'t> {
    pub selection: Selection,
    /// `[k, C']`, rows in selection order.
    pub features: Var<'t>,
}

pub fn gather_points<'t>(logits: &PixelLogits<'t>, selection: Selection) -> Result<SelectedPoints<'t>> {
    let extent = logits.height * logits.width;
    if let Some(&bad) = selection.indices.iter().find(|&&i| i >= extent) {
        return Err(Error::IndexOutOfBounds { index: bad, extent });
    }
    let features = logits.logits.gather(&selection.indices)?;
    Ok(SelectedPoints { selection, features })
}

/// Confidence, selection and gather for one block of one image.
pub fn select_points<'t>(logits: &PixelLogits<'t>, k: usize) -> Result<SelectedPoints<'t>> {
    let conf = pixel_confidence(logits);
    gather_points(logits, select(&conf, k)?)
}

/// `F_concat`: all blocks' selected features stacked, `[N_total, C']`.
pub fn concat_features<'t>(points: &[SelectedPoints<'t>]) -> Result<Var<'t>> {
    let parts: Vec<Var<'t>> = points.iter().map(|p| p.features).collect();
    concat(&parts)
}

/// Classifier weights for block `b` bound on a tape.
pub fn block_weights<'t>(params: &BoundParams<'t>, b: usize) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        params.get(&format!("selector.block{b}.weight"))?,
        params.get(&format!("selector.block{b}.bias"))?,
    ))
}

/// Text dump, one `block rank row col confidence` line per selected point.
pub fn selection_dump(image_id: &str, blocks: &[Selection]) -> String {
    let mut out = format!("# image {image_id}\n# block\trank\trow\tcol\tconfidence\n");
    for (b, sel) in blocks.iter().enumerate() {
        for (rank, (&(row, col), conf)) in sel.coords.iter().zip(&sel.confidences).enumerate() {
            let _ = writeln!(out, "{b}\t{rank}\t{row}\t{col}\t{conf:.9}");
        }
    }
    out
}

/// `(block, rank, row, col, confidence)`.
pub type DumpRow = (usize, usize, usize, usize, f64);

/// Parses [`selection_dump`] output back into rows.
pub fn parse_selection_dump(text: &str) -> Result<Vec<DumpRow>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Data(format!("malformed selection record {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok((
                int(f[0])?,
                int(f[1])?,
                int(f[2])?,
                int(f[3])?,
                f[4].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
