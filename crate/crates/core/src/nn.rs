//! Minimal transformer building blocks over candle tensors.
//!
//! Every parameter is registered in a [`ParamSet`] under its checkpoint name
//! and is either trainable (a [`Var`], tracked by autograd) or frozen (a
//! plain tensor that autograd never reaches).

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{DuetError, Result};

#[derive(Debug, Clone)]
pub enum ParamValue {
    Trainable(Var),
    Frozen(Tensor),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ParamValue,
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        match &self.value {
            ParamValue::Trainable(v) => v.as_tensor(),
            ParamValue::Frozen(t) => t,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.value, ParamValue::Trainable(_))
    }
}

/// Name, shape and size of one parameter.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

/// Ordered registry of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, param: Param) {
        self.params.push(param);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().filter_map(|p| match &p.value {
            ParamValue::Trainable(v) => Some((p.name.as_str(), v)),
            ParamValue::Frozen(_) => None,
        })
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().filter_map(|p| match &p.value {
            ParamValue::Frozen(t) => Some((p.name.as_str(), t)),
            ParamValue::Trainable(_) => None,
        })
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor().elem_count()).sum()
    }

    pub fn infos<'a>(iter: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<ParamInfo> {
        iter.map(|(name, t)| ParamInfo {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            numel: t.elem_count(),
        })
        .collect()
    }

    /// Overwrites every trainable parameter with the same-named tensor in
    /// `weights`. Frozen parameters are left alone.
    pub fn assign_trainable(&self, weights: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.trainable() {
            let t = weights
                .get(name)
                .ok_or_else(|| DuetError::Config(format!("missing weight {name}")))?;
            if t.dims() != var.dims() {
                return Err(DuetError::shape(
                    format!("{name} {:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    /// Trainable parameters only, by name.
    pub fn trainable_map(&self) -> HashMap<String, Tensor> {
        self.trainable()
            .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
            .collect()
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor().clone()))
            .collect()
    }
}

/// SHA-256 over the names and little-endian f32 bytes of the given tensors.
pub fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update(tensor_bytes(t)?);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat.iter().flat_map(|v| v.to_le_bytes()).collect())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

enum Source {
    Loaded(HashMap<String, Tensor>),
    Random(ChaCha8Rng),
}

/// Creates parameters either from loaded weights or from a seeded initializer.
pub struct ParamBuilder {
    source: Source,
    dtype: DType,
    device: Device,
    params: ParamSet,
    train_all: bool,
}

impl ParamBuilder {
    pub fn random(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Random(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: device.clone(),
            params: ParamSet::default(),
            train_all: false,
        }
    }

    pub fn loaded(weights: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Loaded(weights),
            dtype,
            device: device.clone(),
            params: ParamSet::default(),
            train_all: false,
        }
    }

    /// Registers every parameter as trainable regardless of the per-call
    /// flag. Only backbone pretraining uses this.
    pub fn train_everything(mut self) -> Self {
        self.train_all = true;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        let tensor = match &mut self.source {
            Source::Loaded(weights) => {
                let t = weights
                    .get(name)
                    .ok_or_else(|| DuetError::Config(format!("missing weight {name}")))?;
                if t.dims() != shape {
                    return Err(DuetError::shape(
                        format!("{name} {shape:?}"),
                        format!("{:?}", t.dims()),
                    ));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            Source::Random(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        let dist =
                            Normal::new(0.0, std).map_err(|e| DuetError::Config(e.to_string()))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                };
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let (value, out) = if trainable || self.train_all {
            let var = Var::from_tensor(&tensor)?;
            let t = var.as_tensor().clone();
            (ParamValue::Trainable(var), t)
        } else {
            (ParamValue::Frozen(tensor.clone()), tensor)
        };
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        Ok(out)
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = pb.get(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Normal(std),
            trainable,
        )?;
        let bias = if bias {
            Some(pb.get(&format!("{name}.bias"), &[out_dim], Init::Zeros, trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        let weight = pb.get(&format!("{name}.weight"), &[dim], Init::Ones, trainable)?;
        let bias = pb.get(&format!("{name}.bias"), &[dim], Init::Zeros, trainable)?;
        Ok(Self {
            weight,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last dimension, built from
/// differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    let gate = ((x * -1.702)?.exp()? + 1.0)?.recip()?;
    Ok((x * gate)?)
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(pb, &format!("{name}.q_proj"), width, width, true, false)?,
            k: Linear::new(pb, &format!("{name}.k_proj"), width, width, true, false)?,
            v: Linear::new(pb, &format!("{name}.v_proj"), width, width, true, false)?,
            out: Linear::new(pb, &format!("{name}.out_proj"), width, width, true, false)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let hd = w / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split((self.q.forward(x)? * (hd as f64).powf(-0.5))?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?.contiguous()?)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, w))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block. Only the two layer norms may be trainable.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        width: usize,
        heads: usize,
        train_norms: bool,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(DuetError::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            norm1: LayerNorm::new(pb, &format!("{name}.layer_norm1"), width, train_norms)?,
            attn: Attention::new(pb, &format!("{name}.self_attn"), width, heads)?,
            norm2: LayerNorm::new(pb, &format!("{name}.layer_norm2"), width, train_norms)?,
            fc1: Linear::new(
                pb,
                &format!("{name}.mlp.fc1"),
                width,
                4 * width,
                true,
                false,
            )?,
            fc2: Linear::new(
                pb,
                &format!("{name}.mlp.fc2"),
                4 * width,
                width,
                true,
                false,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        let m = self
            .fc2
            .forward(&quick_gelu(&self.fc1.forward(&self.norm2.forward(&h)?)?)?)?;
        Ok((h + m)?)
    }
}

/// Additive mask that hides future positions.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), device)?.to_dtype(dtype)?)
}
