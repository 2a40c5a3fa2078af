//! Four-block convolutional feature extractor and the FPN projection stage.
//!
//! Each block is `conv(k, stride 1) -> ReLU -> conv(k, stride s_b) -> ReLU`.
//! The FPN maps every block to `fpn_size` channels with a 1x1 lateral
//! projection, then walks coarse-to-fine adding the nearest-neighbour
//! upsampled coarser output to each finer projection.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;

pub const NUM_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_resolution: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    pub block_strides: [usize; NUM_BLOCKS],
    pub conv_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            block_channels: [16, 32, 64, 128],
            block_strides: [2, 2, 2, 2],
            conv_kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 {
            return Err(Error::Config("input_resolution must be positive".into()));
        }
        if self.block_channels.contains(&0) || self.block_strides.contains(&0) {
            return Err(Error::Config("block channels and strides must be positive".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        let total: usize = self.block_strides.iter().product();
        if self.input_resolution % total != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} not divisible by stride product {total}",
                self.input_resolution
            )));
        }
        Ok(())
    }

    /// `(channels, height, width)` of each block's output.
    pub fn output_shapes(&self) -> [(usize, usize, usize); NUM_BLOCKS] {
        let mut side = self.input_resolution;
        std::array::from_fn(|b| {
            side /= self.block_strides[b];
            (self.block_channels[b], side, side)
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let k = self.conv_kernel;
        let mut in_ch = 1;
        for (b, &ch) in self.block_channels.iter().enumerate() {
            let p = format!("backbone.block{b}");
            store.init_he(format!("{p}.conv1.weight"), &[ch, in_ch, k, k], in_ch * k * k, rng);
            store.insert(format!("{p}.conv1.bias"), crate::Tensor::zeros([ch]));
            store.init_he(format!("{p}.conv2.weight"), &[ch, ch, k, k], ch * k * k, rng);
            store.insert(format!("{p}.conv2.bias"), crate::Tensor::zeros([ch]));
            in_ch = ch;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub fpn_size: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { fpn_size: 1536 }
    }
}

impl FpnConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.fpn_size < num_classes.max(1) {
            return Err(Error::Config(format!(
                "fpn_size {} smaller than class count {num_classes}",
                self.fpn_size
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, backbone: &BackboneConfig, store: &mut ParamStore, rng: &mut Rng) {
        for (b, &ch) in backbone.block_channels.iter().enumerate() {
            store.init_he(format!("fpn.lateral{b}.weight"), &[self.fpn_size, ch, 1, 1], ch, rng);
            store.insert(format!("fpn.lateral{b}.bias"), crate::Tensor::zeros([self.fpn_size]));
        }
    }
}

/// Per-block feature maps, each `[N, C_b, H_b, W_b]`, finest first.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMapSet<'t> {
    pub maps: [Var<'t>; NUM_BLOCKS],
}

impl<'t> FeatureMapSet<'t> {
    /// `(C, H, W)` of every block, ignoring the batch axis.
    pub fn shapes(&self) -> [(usize, usize, usize); NUM_BLOCKS] {
        std::array::from_fn(|b| {
            let s = self.maps[b].shape();
            (s[1], s[2], s[3])
        })
    }

    fn validate(&self) -> Result<()> {
        let mut prev: Option<(usize, usize)> = None;
        for m in &self.maps {
            let s = m.shape();
            if s.len() != 4 {
                return Err(Error::invalid("feature maps", format!("expected NCHW, got {s:?}")));
            }
            if let Some((h, w)) = prev {
                if s[2] > h || s[3] > w {
                    return Err(Error::invalid(
                        "feature maps",
                        "spatial extents must not grow with depth",
                    ));
                }
            }
            prev = Some((s[2], s[3]));
        }
        Ok(())
    }
}

pub fn backbone_forward<'t>(
    params: &BoundParams<'t>,
    batch: Var<'t>,
    config: &BackboneConfig,
) -> Result<FeatureMapSet<'t>> {
    let shape = batch.shape();
    let r = config.input_resolution;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
        return Err(Error::ShapeMismatch {
            op: "backbone input",
            lhs: shape,
            rhs: vec![0, 1, r, r],
        });
    }
    let pad = config.conv_kernel / 2;
    let mut x = batch;
    let mut maps = Vec::with_capacity(NUM_BLOCKS);
    for (b, &stride) in config.block_strides.iter().enumerate() {
        let p = format!("backbone.block{b}");
        x = x
            .conv2d(
                params.get(&format!("{p}.conv1.weight"))?,
                Some(params.get(&format!("{p}.conv1.bias"))?),
                1,
                pad,
            )?
            .relu();
        x = x
            .conv2d(
                params.get(&format!("{p}.conv2.weight"))?,
                Some(params.get(&format!("{p}.conv2.bias"))?),
                stride,
                pad,
            )?
            .relu();
        maps.push(x);
    }
    Ok(FeatureMapSet {
        maps: maps.try_into().expect("four blocks"),
    })
}

pub fn fpn_project<'t>(
    params: &BoundParams<'t>,
    fmaps: &FeatureMapSet<'t>,
    config: &FpnConfig,
) -> Result<FeatureMapSet<'t>> {
    fmaps.validate()?;
    let lateral: Vec<Var<'t>> = fmaps
        .maps
        .iter()
        .enumerate()
        .map(|(b, &m)| {
            m.conv2d(
                params.get(&format!("fpn.lateral{b}.weight"))?,
                Some(params.get(&format!("fpn.lateral{b}.bias"))?),
                1,
                0,
            )
        })
        .collect::<Result<_>>()?;
    for l in &lateral {
        if l.shape()[1] != config.fpn_size {
            return Err(Error::Config(format!(
                "lateral projection width {} differs from fpn_size {}",
                l.shape()[1],
                config.fpn_size
            )));
        }
    }
    let mut out = lateral.clone();
    for b in (0..NUM_BLOCKS - 1).rev() {
        let fine = lateral[b].shape();
        let coarse = out[b + 1].shape();
        if fine[2] % coarse[2] != 0 || fine[2] / coarse[2] != fine[3] / coarse[3] {
            return Err(Error::invalid(
                "fpn",
                format!("cannot upsample {coarse:?} onto {fine:?} by an integer factor"),
            ));
        }
        let factor = fine[2] / coarse[2];
        let up = if factor == 1 {
            out[b + 1]
        } else {
            out[b + 1].upsample_nearest(factor)?
        };
        out[b] = lateral[b].add(up)?;
    }
    Ok(FeatureMapSet {
        maps: out.try_into().expect("four blocks"),
    })
}
