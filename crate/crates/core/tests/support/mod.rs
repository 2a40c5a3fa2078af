//! Central-difference gradient checking shared by the gradient and acceptance
//! suites.
#![allow(dead_code)]

use pim_core::autodiff::concat;
use pim_core::combiner::{adjacency, cross_entropy_rows, gcn_propagate};
use pim_core::model::{forward, ModelConfig};
use pim_core::params::ParamStore;
use pim_core::selector::Selection;
use pim_core::{rng, Result, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude the error is measured in absolute terms.
pub const ABS_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Uniform entries in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut g = rng::stream(seed, "gradcheck.input");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| g.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in `[0.1, 1)` and random sign, so they sit away from
/// the kinks of relu, sign and abs-like ops.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut g = rng::stream(seed, "gradcheck.signed");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = g.random_range(0.1..1.0);
            if g.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type GraphFn<'f> = dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'f;

/// Reduces `out` to a scalar with fixed random weights, so every output entry
/// gets a distinct cotangent.
fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = uniform(&out.shape(), 0.5, 1.5, seed ^ 0x5eed);
    let w = out.tape().constant(w);
    Ok(out.mul(w)?.sum_all())
}

fn scalar_value(inputs: &[Tensor], f: &GraphFn<'_>, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = weighted_sum(f(&vars)?, seed)?;
    let v = out.value().item();
    Ok(v)
}

/// Largest relative error between the tape gradient and central differences
/// over every coordinate of every input.
pub fn max_grad_error(inputs: &[Tensor], f: &GraphFn<'_>, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_sum(f(&vars)?, seed)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += FD_STEP;
            let plus = scalar_value(&shifted, f, seed)?;
            shifted[i].data_mut()[j] -= 2.0 * FD_STEP;
            let minus = scalar_value(&shifted, f, seed)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

pub type OpFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

/// One case per differentiable op (and per broadcast or conv variant).
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = away_from_zero(&[3, 4], 1);
    let b = away_from_zero(&[3, 4], 2);
    let s = Tensor::scalar(0.7);
    let pos = uniform(&[3, 4], 0.2, 2.0, 3);
    let cube = away_from_zero(&[2, 3, 4], 5);
    let x = away_from_zero(&[2, 2, 5, 6], 9);
    let k = away_from_zero(&[3, 2, 3, 3], 10);
    let kb = away_from_zero(&[3], 11);
    let nodes = away_from_zero(&[5, 3], 13);
    let theta = away_from_zero(&[3, 3], 14);
    vec![
        ("add", vec![a.clone(), b.clone()], |v| v[0].add(v[1])),
        ("sub", vec![a.clone(), b.clone()], |v| v[0].sub(v[1])),
        ("mul", vec![a.clone(), b.clone()], |v| v[0].mul(v[1])),
        ("mul scalar lhs", vec![s.clone(), b.clone()], |v| v[0].mul(v[1])),
        ("sub scalar rhs", vec![a.clone(), s], |v| v[0].sub(v[1])),
        ("add_scalar", vec![a.clone()], |v| Ok(v[0].add_scalar(1.5))),
        ("scale", vec![a.clone()], |v| Ok(v[0].scale(-2.5))),
        ("neg", vec![a.clone()], |v| Ok(v[0].neg())),
        ("relu", vec![a.clone()], |v| Ok(v[0].relu())),
        ("exp", vec![a.clone()], |v| Ok(v[0].exp())),
        ("ln", vec![pos], |v| Ok(v[0].ln())),
        ("sign", vec![a.clone()], |v| Ok(v[0].sign())),
        ("matmul", vec![a.clone(), away_from_zero(&[4, 2], 6)], |v| {
            v[0].matmul(v[1])
        }),
        ("t", vec![a.clone()], |v| v[0].t()),
        ("permute", vec![cube.clone()], |v| v[0].permute(&[2, 0, 1])),
        ("reshape", vec![cube.clone()], |v| v[0].reshape(&[6, 4])),
        ("softmax axis 0", vec![a.clone()], |v| v[0].softmax(0)),
        ("softmax axis 1", vec![a.clone()], |v| v[0].softmax(1)),
        ("log_softmax", vec![cube.clone()], |v| v[0].log_softmax(2)),
        ("sum", vec![cube.clone()], |v| v[0].sum(1)),
        ("mean", vec![cube.clone()], |v| v[0].mean(0)),
        ("sum_all", vec![a.clone()], |v| Ok(v[0].sum_all())),
        ("mean_all", vec![a.clone()], |v| Ok(v[0].mean_all())),
        ("max", vec![cube.clone()], |v| v[0].max(2)),
        ("gather", vec![a.clone()], |v| v[0].gather(&[2, 0, 2])),
        ("take", vec![cube.clone()], |v| v[0].take(&[23, 0, 5, 5, 11])),
        ("add_bias", vec![a.clone(), away_from_zero(&[4], 7)], |v| {
            v[0].add_bias(v[1])
        }),
        ("concat", vec![a, away_from_zero(&[2, 4], 8)], |v| concat(&[v[0], v[1]])),
        ("upsample_nearest", vec![cube.reshape([1, 2, 3, 4]).unwrap()], |v| {
            v[0].upsample_nearest(2)
        }),
        ("conv2d s1 p1 bias", vec![x.clone(), k.clone(), kb.clone()], |v| {
            v[0].conv2d(v[1], Some(v[2]), 1, 1)
        }),
        ("conv2d s2 p1 bias", vec![x.clone(), k.clone(), kb], |v| {
            v[0].conv2d(v[1], Some(v[2]), 2, 1)
        }),
        ("conv2d s1 p0", vec![x.clone(), k], |v| v[0].conv2d(v[1], None, 1, 0)),
        ("conv2d 1x1", vec![x, away_from_zero(&[4, 2, 1, 1], 12)], |v| {
            v[0].conv2d(v[1], None, 1, 0)
        }),
        ("adjacency", vec![nodes.clone()], |v| adjacency(v[0], 2.0)),
        ("gcn_propagate", vec![nodes.clone(), theta], |v| {
            gcn_propagate(adjacency(v[0], 1.0)?, v[0], v[1])
        }),
        ("cross_entropy_rows", vec![nodes], |v| {
            cross_entropy_rows(v[0], &[0, 2, 1, 1, 0])
        }),
    ]
}

/// Applies a recorded op sequence to `[x, W, b]`. The last code picks the
/// final reduction.
pub fn composed<'t>(ops: &[u8], v: &[Var<'t>]) -> Result<Var<'t>> {
    let (x, w, b) = (v[0], v[1], v[2]);
    let mut h = x;
    for &op in &ops[..ops.len() - 1] {
        h = match op {
            0 => h.matmul(w)?.add_bias(b)?,
            1 => h.softmax(1)?,
            2 => h.log_softmax(1)?.scale(0.3),
            3 => h.mul(x)?,
            4 => h.scale(0.3).exp(),
            5 => h.mul(h)?.add_scalar(0.5).ln(),
            _ => h.add(x)?,
        };
    }
    match ops[ops.len() - 1] {
        0 => h.max(1),
        1 => h.mean(0),
        _ => Ok(h),
    }
}

/// Worst error over `count` random composed graphs on `x [3,4]`, `W [4,4]`,
/// `b [4]`, with the op codes of the worst graph.
pub fn composed_graphs(count: u64, seed: u64) -> Result<(f64, Vec<u8>)> {
    let mut g = rng::stream(seed, "gradcheck.graphs");
    let mut worst = (0.0, Vec::new());
    for graph in 0..count {
        let depth = g.random_range(3..8);
        let mut ops: Vec<u8> = (0..depth).map(|_| g.random_range(0..7)).collect();
        ops.push(g.random_range(0..3));
        let inputs = [
            away_from_zero(&[3, 4], 100 + graph),
            uniform(&[4, 4], -0.8, 0.8, 200 + graph),
            uniform(&[4], -0.5, 0.5, 300 + graph),
        ];
        let f: &GraphFn<'_> = &|v| composed(&ops, v);
        let err = max_grad_error(&inputs, f, graph)?;
        if err >= worst.0 {
            worst = (err, ops);
        }
    }
    Ok(worst)
}

/// Configuration of the 2-class 8x8 model used for the full-model check.
pub fn tiny_model() -> ModelConfig {
    use pim_core::backbone::BackboneConfig;
    use pim_core::backbone::FpnConfig;
    use pim_core::combiner::GcnConfig;
    use pim_core::selector::SelectionConfig;
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

/// Chosen positions of every block of every image.
fn chosen(sel: &[[Selection; 4]]) -> Vec<Vec<usize>> {
    sel.iter().flat_map(|s| s.iter().map(|b| b.indices.clone())).collect()
}

fn model_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Vec<usize>>)> {
    let tape = Tape::new();
    let out = forward(&params.bind_frozen(&tape), tape.constant(batch.clone()), cfg)?;
    let (loss, _) = out.loss(labels, &cfg.loss_weights)?;
    let v = loss.value().item();
    Ok((v, chosen(&out.selections)))
}

#[derive(Debug, Default)]
pub struct ModelCheck {
    pub checked: usize,
    /// Coordinates whose perturbation changed a top-k selection.
    pub skipped: usize,
    pub max_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checks d(loss)/d(param) for every coordinate of every parameter of the
/// full model. Coordinates whose `+-h` perturbation alters any selection are
/// skipped because the loss is not differentiable across a top-k switch.
pub fn check_model(cfg: &ModelConfig, params: &ParamStore, batch: &Tensor, labels: &[usize]) -> Result<ModelCheck> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&bound, tape.constant(batch.clone()), cfg)?;
    let (loss, _) = out.loss(labels, &cfg.loss_weights)?;
    let base_sel = chosen(&out.selections);
    let analytic = bound.grads(&tape.backward(loss)?);

    let mut report = ModelCheck::default();
    let mut p = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        for j in 0..n {
            let orig = p.get(&name)?.data()[j];
            p.get_mut(&name)?.data_mut()[j] = orig + FD_STEP;
            let (plus, sel_p) = model_loss(&p, cfg, batch, labels)?;
            p.get_mut(&name)?.data_mut()[j] = orig - FD_STEP;
            let (minus, sel_m) = model_loss(&p, cfg, batch, labels)?;
            p.get_mut(&name)?.data_mut()[j] = orig;
            if sel_p != base_sel || sel_m != base_sel {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[&name].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_err {
                report.max_err = e;
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
