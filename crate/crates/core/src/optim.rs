//! LION, SGD with heavy-ball momentum, and AdamW.
//!
//! The `*_step` functions work on flat slices of one parameter. The
//! [`Optimizer`] implementations apply them across a [`ParamStore`], keep
//! their state keyed by parameter name, and serialise that state into an
//! [`ArrayFile`] under the `optim.` prefix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ArrayFile;
use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{sign, Tensor};

fn check_lengths(op: &'static str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::invalid(op, format!("slice lengths differ: {lens:?}")));
    }
    Ok(())
}

fn check_finite(grads: &[f64]) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite gradient {} at {i}", grads[i]))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.99,
            gamma: 0.0,
            delta: 5e-6,
        }
    }
}

impl LionConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            gamma,
            delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.alpha) || !open_unit(self.beta) {
            return Err(Error::Config(format!(
                "lion alpha and beta must lie in (0, 1), got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("lion gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("lion delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// One LION update. `c` and the parameter update use the momentum and
/// parameters from before the step; the momentum is refreshed last.
pub fn lion_step(params: &mut [f64], grads: &[f64], momentum: &mut [f64], cfg: &LionConfig) -> Result<()> {
    check_lengths("lion_step", &[params.len(), grads.len(), momentum.len()])?;
    check_finite(grads)?;
    let LionConfig {
        alpha,
        beta,
        gamma,
        delta,
    } = *cfg;
    for ((w, &g), mu) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let c = alpha * *mu + (1.0 - alpha) * g;
        *w -= delta * (sign(c) + gamma * *w);
        *mu = beta * *mu + (1.0 - beta) * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    /// Heavy-ball coefficient; 0 disables momentum.
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("sgd lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "sgd momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `v <- m v + g; w <- w - lr v`. Without a velocity buffer this is plain SGD.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: Option<&mut [f64]>, cfg: &SgdConfig) -> Result<()> {
    check_finite(grads)?;
    match velocity {
        Some(vel) => {
            check_lengths("sgd_step", &[params.len(), grads.len(), vel.len()])?;
            for ((w, &g), v) in params.iter_mut().zip(grads).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
        }
        None => {
            check_lengths("sgd_step", &[params.len(), grads.len()])?;
            for (w, &g) in params.iter_mut().zip(grads) {
                *w -= cfg.lr * g;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("adamw needs lr > 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adamw needs eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// One AdamW update; `step` is the 1-based step count after this update.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_lengths("adamw_step", &[params.len(), grads.len(), m.len(), v.len()])?;
    check_finite(grads)?;
    if step == 0 {
        return Err(Error::invalid("adamw_step", "step count starts at 1"));
    }
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *w -= cfg.lr * (update + cfg.weight_decay * *w);
    }
    Ok(())
}

/// Optimizer over named parameters.
pub trait Optimizer {
    fn name(&self) -> &'static str;

    /// Applies one update. Every gradient is validated before any parameter
    /// or state array changes.
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()>;

    /// State arrays kept per parameter.
    fn arrays_per_param(&self) -> usize;

    fn save_state(&self, file: &mut ArrayFile) -> Result<()>;

    fn load_state(&mut self, file: &ArrayFile) -> Result<()>;
}

fn validate_grads(params: &ParamStore, grads: &GradStore) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        check_finite(g.data()).map_err(|e| Error::Numeric(format!("parameter `{name}`: {e}")))?;
    }
    Ok(())
}

/// Named state buffers mirroring parameter shapes, created as zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateBuffers {
    buffers: BTreeMap<String, Tensor>,
}

impl StateBuffers {
    fn slot(&mut self, name: &str, like: &Tensor) -> &mut Tensor {
        self.buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    fn save(&self, prefix: &str, file: &mut ArrayFile) -> Result<()> {
        for (name, t) in &self.buffers {
            file.push(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    fn load(prefix: &str, file: &ArrayFile) -> Self {
        Self {
            buffers: file
                .params_with_prefix(prefix)
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lion {
    pub config: LionConfig,
    pub momentum: StateBuffers,
}

impl Lion {
    pub fn new(config: LionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            momentum: StateBuffers::default(),
        })
    }
}

impl Optimizer for Lion {
    fn name(&self) -> &'static str {
        "lion"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        validate_grads(params, grads)?;
        for (name, p) in params.iter_mut() {
            let mu = self.momentum.slot(name, p);
            lion_step(p.data_mut(), grads[name].data(), mu.data_mut(), &self.config)?;
        }
        Ok(())
    }

    fn arrays_per_param(&self) -> usize {
        1
    }

    fn save_state(&self, file: &mut ArrayFile) -> Result<()> {
        self.momentum.save("optim.lion.momentum.", file)
    }

    fn load_state(&mut self, file: &ArrayFile) -> Result<()> {
        self.momentum = StateBuffers::load("optim.lion.momentum.", file);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: StateBuffers,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: StateBuffers::default(),
        })
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        validate_grads(params, grads)?;
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            if self.config.momentum > 0.0 {
                let v = self.velocity.slot(name, p);
                sgd_step(p.data_mut(), g, Some(v.data_mut()), &self.config)?;
            } else {
                sgd_step(p.data_mut(), g, None, &self.config)?;
            }
        }
        Ok(())
    }

    fn arrays_per_param(&self) -> usize {
        usize::from(self.config.momentum > 0.0)
    }

    fn save_state(&self, file: &mut ArrayFile) -> Result<()> {
        self.velocity.save("optim.sgd.velocity.", file)
    }

    fn load_state(&mut self, file: &ArrayFile) -> Result<()> {
        self.velocity = StateBuffers::load("optim.sgd.velocity.", file);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: StateBuffers,
    pub v: StateBuffers,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: StateBuffers::default(),
            v: StateBuffers::default(),
        })
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        validate_grads(params, grads)?;
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let m = self.m.slot(name, p);
            let v = self.v.slot(name, p);
            adamw_step(
                p.data_mut(),
                grads[name].data(),
                m.data_mut(),
                v.data_mut(),
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }

    fn arrays_per_param(&self) -> usize {
        2
    }

    fn save_state(&self, file: &mut ArrayFile) -> Result<()> {
        file.push("optim.adamw.step", Tensor::scalar(self.step as f64))?;
        self.m.save("optim.adamw.m.", file)?;
        self.v.save("optim.adamw.v.", file)
    }

    fn load_state(&mut self, file: &ArrayFile) -> Result<()> {
        self.step = file.get("optim.adamw.step").map_or(0, |t| t.item() as u64);
        self.m = StateBuffers::load("optim.adamw.m.", file);
        self.v = StateBuffers::load("optim.adamw.v.", file);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Lion(LionConfig),
    Sgd(SgdConfig),
    Adamw(AdamWConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Lion(LionConfig::default())
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Lion(c) => c.validate(),
            Self::Sgd(c) => c.validate(),
            Self::Adamw(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Optimizer>> {
        Ok(match *self {
            Self::Lion(c) => Box::new(Lion::new(c)?),
            Self::Sgd(c) => Box::new(Sgd::new(c)?),
            Self::Adamw(c) => Box::new(AdamW::new(c)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lion_examples() {
        let cfg = LionConfig::default();
        let (mut w, mut mu) = (vec![0.3, -2.0], vec![0.0, 0.0]);
        lion_step(&mut w, &[0.0, 0.0], &mut mu, &cfg).unwrap();
        assert_eq!((w.as_slice(), mu.as_slice()), (&[0.3, -2.0][..], &[0.0, 0.0][..]));

        let cfg = LionConfig::new(0.9, 0.99, 0.1, 0.01).unwrap();
        let (mut w, mut mu) = ([1.0], [0.0]);
        lion_step(&mut w, &[0.5], &mut mu, &cfg).unwrap();
        assert!((w[0] - 0.989).abs() < 1e-15);
        assert!((mu[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn lion_rejects_non_finite_without_mutation() {
        let cfg = LionConfig::default();
        let (mut w, mut mu) = (vec![1.0, 2.0], vec![0.1, 0.2]);
        let err = lion_step(&mut w, &[0.5, f64::NAN], &mut mu, &cfg).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Numeric);
        assert_eq!((w, mu), (vec![1.0, 2.0], vec![0.1, 0.2]));
        assert!(LionConfig::new(1.0, 0.99, 0.0, 1e-3).is_err());
        assert!(LionConfig::new(0.9, 0.99, 0.0, 0.0).is_err());
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0 };
        let mut w = [1.0];
        sgd_step(&mut w, &[2.0], None, &cfg).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut w, &[0.0], None, &cfg).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);

        let cfg = SgdConfig { lr: 0.1, momentum: 0.9 };
        let (mut w, mut v) = ([1.0], [0.0]);
        sgd_step(&mut w, &[1.0], Some(&mut v), &cfg).unwrap();
        sgd_step(&mut w, &[1.0], Some(&mut v), &cfg).unwrap();
        // v1 = 1, w1 = 0.9; v2 = 1.9, w2 = 0.71
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((w[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn adamw_examples() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let (mut w, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_step(&mut w, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert!((w[0] - (1.0 - cfg.lr)).abs() < 1e-9);

        let (mut w, mut m, mut v) = ([1.5], [0.0], [0.0]);
        adamw_step(&mut w, &[0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!(w[0], 1.5);

        let cfg = AdamWConfig::default();
        let (mut w, mut m, mut v) = ([2.0], [0.0], [0.0]);
        adamw_step(&mut w, &[0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert!((w[0] - 2.0 * (1.0 - cfg.lr * cfg.weight_decay)).abs() < 1e-15);
    }

    fn store(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(*n, Tensor::from_vec(v.clone()));
        }
        s
    }

    #[test]
    fn state_arrays_and_checkpoint_roundtrip() {
        let mut params = store(&[("a", vec![1.0, 2.0]), ("b", vec![-1.0])]);
        let grads: GradStore = [
            ("a".to_string(), Tensor::from_vec(vec![0.5, -0.5])),
            ("b".to_string(), Tensor::from_vec(vec![0.25])),
        ]
        .into();
        let mut lion = Lion::new(LionConfig::default()).unwrap();
        let mut adam = AdamW::new(AdamWConfig::default()).unwrap();
        lion.step(&mut params.clone(), &grads).unwrap();
        adam.step(&mut params.clone(), &grads).unwrap();
        assert_eq!(lion.arrays_per_param(), 1);
        assert_eq!(adam.arrays_per_param(), 2);
        assert_eq!(lion.momentum.len(), params.len());
        assert_eq!(adam.m.len() + adam.v.len(), 2 * params.len());

        let mut file = ArrayFile::new();
        lion.save_state(&mut file).unwrap();
        assert_eq!(file.len(), params.len());
        let mut back = Lion::new(LionConfig::default()).unwrap();
        back.load_state(&ArrayFile::from_bytes(&file.to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back.momentum, lion.momentum);

        let mut file = ArrayFile::new();
        adam.save_state(&mut file).unwrap();
        let mut back = AdamW::new(AdamWConfig::default()).unwrap();
        back.load_state(&file).unwrap();
        assert_eq!((back.step, &back.m, &back.v), (1, &adam.m, &adam.v));

        let mut bad = grads.clone();
        bad.insert("b".into(), Tensor::from_vec(vec![f64::INFINITY]));
        let before = params.clone();
        let mu_before = lion.momentum.clone();
        assert!(lion.step(&mut params, &bad).is_err());
        assert_eq!((params, lion.momentum), (before, mu_before));
    }

    #[test]
    fn optimizer_config_parses_tagged() {
        let cfg: OptimizerConfig = toml::from_str("kind = \"sgd\"\nlr = 0.01\nmomentum = 0.9\n").unwrap();
        assert_eq!(
            cfg,
            OptimizerConfig::Sgd(SgdConfig {
                lr: 0.01,
                momentum: 0.9
            })
        );
        let cfg: OptimizerConfig = toml::from_str("kind = \"lion\"\ndelta = 1e-4\n").unwrap();
        assert_eq!(
            cfg,
            OptimizerConfig::Lion(LionConfig {
                delta: 1e-4,
                ..LionConfig::default()
            })
        );
        assert_eq!(cfg.build().unwrap().name(), "lion");
    }

    proptest! {
        #[test]
        fn lion_momentum_recurrence(g in -10.0f64..10.0, steps in 1i32..40) {
            let cfg = LionConfig::default();
            let (mut w, mut mu) = ([0.0], [0.0]);
            for _ in 0..steps {
                lion_step(&mut w, &[g], &mut mu, &cfg).unwrap();
            }
            let want = g * (1.0 - cfg.beta.powi(steps));
            prop_assert!((mu[0] - want).abs() <= 1e-12 * (1.0 + g.abs()));
        }

        #[test]
        fn lion_scale_invariant(
            g in prop::collection::vec(-5.0f64..5.0, 1..8),
            lambda in 1e-3f64..1e3,
        ) {
            let cfg = LionConfig::default();
            let scaled: Vec<f64> = g.iter().map(|x| x * lambda).collect();
            let (mut w1, mut m1) = (vec![0.5; g.len()], vec![0.0; g.len()]);
            let (mut w2, mut m2) = (w1.clone(), m1.clone());
            lion_step(&mut w1, &g, &mut m1, &cfg).unwrap();
            lion_step(&mut w2, &scaled, &mut m2, &cfg).unwrap();
            prop_assert_eq!(w1, w2);
        }
    }
}
