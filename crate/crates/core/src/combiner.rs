//! Fusion of the selected points into one prediction, and the per-block and
//! total cross-entropy losses.
//!
//! The graph combiner builds a dense similarity graph over the selected
//! points, runs `gcn_layers` rounds of `X <- ReLU(A X Theta)`, pools the nodes
//! into `num_supernodes` soft clusters and classifies the supernode mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::NUM_BLOCKS;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::selector::PixelLogits;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    pub num_supernodes: usize,
    pub gcn_layers: usize,
    /// `f64::INFINITY` gives a uniform adjacency.
    pub adjacency_temperature: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            num_supernodes: 4,
            gcn_layers: 1,
            adjacency_temperature: 1.0,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_supernodes == 0 || self.gcn_layers == 0 {
            return Err(Error::Config(
                "gcn num_supernodes and gcn_layers must be positive".into(),
            ));
        }
        if !(self.adjacency_temperature > 0.0) {
            return Err(Error::Config(format!(
                "adjacency_temperature must be positive, got {}",
                self.adjacency_temperature
            )));
        }
        Ok(())
    }

    /// Layer weights start at the identity, the head at the identity, and
    /// the pooling projection He-uniform.
    pub fn init_params(&self, classes: usize, store: &mut ParamStore, rng: &mut Rng) {
        for l in 0..self.gcn_layers {
            store.insert(format!("combiner.theta{l}"), identity(classes));
        }
        store.init_he("combiner.phi", &[classes, self.num_supernodes], classes, rng);
        store.insert("combiner.head.weight", identity(classes));
        store.insert("combiner.head.bias", Tensor::zeros([classes]));
    }
}

pub(crate) fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros([n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Bound combiner weights.
#[derive(Debug, Clone)]
pub struct GcnWeights<'t> {
    pub theta: Vec<Var<'t>>,
    /// `[C', supernodes]`.
    pub phi: Var<'t>,
    /// `[C', C']`, out x in.
    pub head_weight: Var<'t>,
    pub head_bias: Var<'t>,
}

impl<'t> GcnWeights<'t> {
    pub fn bind(params: &BoundParams<'t>, config: &GcnConfig) -> Result<Self> {
        Ok(Self {
            theta: (0..config.gcn_layers)
                .map(|l| params.get(&format!("combiner.theta{l}")))
                .collect::<Result<_>>()?,
            phi: params.get("combiner.phi")?,
            head_weight: params.get("combiner.head.weight")?,
            head_bias: params.get("combiner.head.bias")?,
        })
    }
}

/// Linear head on a single feature vector `[C]`, returning `[C']`.
fn linear_vec<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let n = x.value().numel();
    let out = x.reshape(&[1, n])?.matmul(weight.t()?)?.add_bias(bias)?;
    let c = out.value().numel();
    out.reshape(&[c])
}

/// `F_pred = flatten(F_concat) W + b`, with `W` of shape `(N_total*C') x C'`.
pub fn concat_predict<'t>(features: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (fs, ws) = (features.shape(), weight.shape());
    if fs.len() != 2 || ws.len() != 2 || ws[0] != fs[0] * fs[1] {
        return Err(Error::ShapeMismatch {
            op: "concat_predict",
            lhs: fs,
            rhs: ws,
        });
    }
    let flat = features.reshape(&[1, ws[0]])?;
    let out = flat.matmul(weight)?.add_bias(bias)?;
    out.reshape(&[ws[1]])
}

/// Row-softmax similarity adjacency `softmax(X X^T / T)`.
pub fn adjacency<'t>(x: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let n = x.shape()[0];
    if temperature.is_infinite() {
        return Ok(x.tape().constant(Tensor::full([n, n], 1.0 / n as f64)));
    }
    x.matmul(x.t()?)?.scale(1.0 / temperature).softmax(1)
}

/// One graph-convolution round, `ReLU(A X Theta)`.
pub fn gcn_propagate<'t>(adj: Var<'t>, x: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    Ok(adj.matmul(x)?.matmul(theta)?.relu())
}

/// Graph combiner over node features `[N_total, C']`, returning `[C']`.
pub fn gcn_fuse<'t>(nodes: Var<'t>, config: &GcnConfig, weights: &GcnWeights<'t>) -> Result<Var<'t>> {
    let s = nodes.shape();
    if s.len() != 2 {
        return Err(Error::invalid("gcn_fuse", format!("expected [N, C'], got {s:?}")));
    }
    if s[0] < config.num_supernodes {
        return Err(Error::invalid(
            "gcn_fuse",
            format!("{} nodes cannot fill {} supernodes", s[0], config.num_supernodes),
        ));
    }
    let mut x = nodes;
    for &theta in &weights.theta {
        let adj = adjacency(x, config.adjacency_temperature)?;
        x = gcn_propagate(adj, x, theta)?;
    }
    let assign = x.matmul(weights.phi)?.softmax(0)?;
    let pooled = assign.t()?.matmul(x)?;
    linear_vec(pooled.mean(0)?, weights.head_weight, weights.head_bias)
}

/// Mean logit vector over all positions, `[C']`.
pub fn average_predict<'t>(logits: &PixelLogits<'t>) -> Result<Var<'t>> {
    logits.logits.mean(0)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::IndexOutOfBounds {
            index: label,
            extent: classes,
        });
    }
    Ok(())
}

/// `-log softmax(v)[label]` for a score vector `[C']`.
pub fn block_loss<'t>(v: Var<'t>, label: usize) -> Result<Var<'t>> {
    let s = v.shape();
    if s.len() != 1 {
        return Err(Error::invalid("block_loss", format!("expected [C'], got {s:?}")));
    }
    check_label(label, s[0])?;
    Ok(v.log_softmax(0)?.take(&[label])?.sum_all().neg())
}

/// Mean cross-entropy over the rows of `[N, C']` scores.
pub fn cross_entropy_rows<'t>(scores: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: s,
            rhs: vec![labels.len()],
        });
    }
    let c = s[1];
    let mut flat = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        check_label(l, c)?;
        flat.push(i * c + l);
    }
    Ok(scores.log_softmax(1)?.take(&flat)?.mean_all().neg())
}

/// Per-term weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub blocks: [f64; NUM_BLOCKS],
    pub combiner: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            blocks: [1.0; NUM_BLOCKS],
            combiner: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub block_losses: [f64; NUM_BLOCKS],
    pub combiner_loss: f64,
    pub total: f64,
}

/// Weighted sum of the block terms and the combiner term. Every term is a
/// scalar loss already reduced over the batch.
pub fn combine_losses<'t>(
    block_terms: [Var<'t>; NUM_BLOCKS],
    combiner_term: Var<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    let mut total = block_terms[0].scale(weights.blocks[0]);
    for (term, &w) in block_terms.iter().zip(&weights.blocks).skip(1) {
        total = total.add(term.scale(w))?;
    }
    let total = total.add(combiner_term.scale(weights.combiner))?;
    let report = LossReport {
        block_losses: std::array::from_fn(|b| block_terms[b].value().item()),
        combiner_loss: combiner_term.value().item(),
        total: total.value().item(),
    };
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", report.total)));
    }
    Ok((total, report))
}

/// Total loss of one image: each block's averaged logits and the combiner
/// prediction scored against `label`.
pub fn total_loss<'t>(
    blocks: &[PixelLogits<'t>; NUM_BLOCKS],
    combiner: Var<'t>,
    label: usize,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    let mut terms = Vec::with_capacity(NUM_BLOCKS);
    for b in blocks {
        terms.push(block_loss(average_predict(b)?, label)?);
    }
    let terms: [Var<'t>; NUM_BLOCKS] = terms.try_into().expect("four blocks");
    combine_losses(terms, block_loss(combiner, label)?, weights)
}
