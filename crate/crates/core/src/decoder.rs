//! Reconstruction decoder used only by the reconstruction loss.
//!
//! A query vector is mapped by one affine layer onto a small spatial grid
//! (8×8 for 32-pixel and 64-pixel photos), then expanded by
//! nearest-neighbour upsampling and 3×3 convolutions to the photo size.
//! There is no contracting path, hence no skip connections. The output
//! passes through a sigmoid so pixels lie in `[0, 1]`.
//!
//! Decoder weights are stored apart from the inference weights and are not
//! needed to answer queries.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};
use crate::nn::{Init, Linear, ParamBuilder, ParamSet};

pub const MAX_PARAMETERS: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DecoderConfig {
    /// Channels on the initial grid, halved (down to 16) after every
    /// upsampling block. `None` picks the widest of 64/32/16/8 that keeps
    /// the decoder under [`MAX_PARAMETERS`].
    pub channels: Option<usize>,
}

/// Number of doublings and the starting grid side for an output side.
fn grid_plan(resolution: usize) -> (usize, usize) {
    let mut side = resolution;
    let mut ups = 0;
    while side.is_multiple_of(2) && side / 2 >= 8 {
        side /= 2;
        ups += 1;
    }
    (side, ups)
}

fn channel_plan(c0: usize, ups: usize) -> Vec<usize> {
    (0..=ups).map(|i| (c0 >> i).max(16.min(c0))).collect()
}

fn parameter_count(d: usize, resolution: usize, c0: usize) -> usize {
    let (side, ups) = grid_plan(resolution);
    let ch = channel_plan(c0, ups);
    let mut n = d * c0 * side * side + c0 * side * side;
    for i in 0..ups {
        n += ch[i + 1] * ch[i] * 9 + ch[i + 1];
    }
    n + 3 * ch[ups] * 9 + 3
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let weight = pb.get(
            &format!("{name}.weight"),
            &[cout, cin, 3, 3],
            Init::Normal(std),
            true,
        )?;
        let bias = pb.get(&format!("{name}.bias"), &[cout], Init::Zeros, true)?;
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dims()[0];
        Ok(x.conv2d(&self.weight, 1, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub struct Decoder {
    proj: Linear,
    blocks: Vec<Conv>,
    out: Conv,
    in_dim: usize,
    side: usize,
    channels: usize,
    resolution: usize,
    params: ParamSet,
}

impl std::fmt::Debug for Decoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Decoder")
            .field("in_dim", &self.in_dim)
            .field("grid", &self.side)
            .field("channels", &self.channels)
            .field("resolution", &self.resolution)
            .finish()
    }
}

impl Decoder {
    pub fn new(
        in_dim: usize,
        resolution: usize,
        config: &DecoderConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::build(
            in_dim,
            resolution,
            config,
            ParamBuilder::random(seed, dtype, device),
        )
    }

    pub fn from_weights(
        in_dim: usize,
        resolution: usize,
        config: &DecoderConfig,
        weights: HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::build(
            in_dim,
            resolution,
            config,
            ParamBuilder::loaded(weights, dtype, device),
        )
    }

    fn build(
        in_dim: usize,
        resolution: usize,
        config: &DecoderConfig,
        mut pb: ParamBuilder,
    ) -> Result<Self> {
        if resolution < 4 {
            return Err(DuetError::Config(format!(
                "decoder resolution {resolution} is too small"
            )));
        }
        let c0 = match config.channels {
            Some(c) if c > 0 => c,
            Some(_) => {
                return Err(DuetError::Config(
                    "decoder channels must be positive".into(),
                ))
            }
            None => [64, 32, 16, 8]
                .into_iter()
                .find(|&c| parameter_count(in_dim, resolution, c) < MAX_PARAMETERS)
                .unwrap_or(8),
        };
        let (side, ups) = grid_plan(resolution);
        let ch = channel_plan(c0, ups);
        let proj = Linear::new(
            &mut pb,
            "decoder.proj",
            in_dim,
            c0 * side * side,
            true,
            true,
        )?;
        let blocks = (0..ups)
            .map(|i| Conv::new(&mut pb, &format!("decoder.blocks.{i}"), ch[i], ch[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv::new(&mut pb, "decoder.out", ch[ups], 3)?;
        Ok(Self {
            proj,
            blocks,
            out,
            in_dim,
            side,
            channels: c0,
            resolution,
            params: pb.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_numel()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(B, d)` queries to `(B, 3, H, W)` images in `[0, 1]`; a single `(d)`
    /// query gives `(3, H, W)`.
    pub fn forward(&self, query: &Tensor) -> Result<Tensor> {
        if query.rank() == 1 {
            return Ok(self.forward(&query.unsqueeze(0)?)?.squeeze(0)?);
        }
        let (b, d) = query.dims2()?;
        if d != self.in_dim {
            return Err(DuetError::Config(format!(
                "decoder expects width {}, got {d}",
                self.in_dim
            )));
        }
        let mut x = self
            .proj
            .forward(query)?
            .reshape((b, self.channels, self.side, self.side))?
            .relu()?;
        for block in &self.blocks {
            let (_, _, h, w) = x.dims4()?;
            x = block
                .forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?
                .relu()?;
        }
        let logits = self.out.forward(&x)?;
        Ok((logits.neg()?.exp()? + 1.0)?.recip()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_plans() {
        assert_eq!(grid_plan(32), (8, 2));
        assert_eq!(grid_plan(8), (8, 0));
        assert_eq!(grid_plan(224), (14, 4));
    }

    #[test]
    fn output_shape_range_and_budget() {
        let dev = Device::Cpu;
        let dec = Decoder::new(128, 32, &DecoderConfig::default(), 1, DType::F32, &dev).unwrap();
        assert!(dec.parameter_count() < MAX_PARAMETERS);
        let q = Tensor::randn(0f32, 1.0, (2, 128), &dev).unwrap();
        let y = dec.forward(&q).unwrap();
        assert_eq!(y.dims(), &[2, 3, 32, 32]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        let big = Decoder::new(768, 224, &DecoderConfig::default(), 1, DType::F32, &dev).unwrap();
        assert!(
            big.parameter_count() < MAX_PARAMETERS,
            "{}",
            big.parameter_count()
        );
        assert_eq!(
            parameter_count(768, 224, big.channels),
            big.parameter_count()
        );
    }

    #[test]
    fn different_queries_decode_differently() {
        let dev = Device::Cpu;
        let dec = Decoder::new(16, 16, &DecoderConfig::default(), 2, DType::F64, &dev).unwrap();
        let a = dec
            .forward(&Tensor::ones(16, DType::F64, &dev).unwrap())
            .unwrap();
        let b = dec
            .forward(&Tensor::ones(16, DType::F64, &dev).unwrap().neg().unwrap())
            .unwrap();
        assert_eq!(a.dims(), &[3, 16, 16]);
        let diff = scalar_abs_diff(&a, &b);
        assert!(diff > 1e-3, "{diff}");
        assert!(dec
            .forward(&Tensor::ones(8, DType::F64, &dev).unwrap())
            .is_err());
    }

    fn scalar_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }
}
