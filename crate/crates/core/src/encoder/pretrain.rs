//! Contrastive pretraining of small surrogate backbones.
//!
//! Real dual-encoder checkpoints are large and cannot ship with the
//! repository. For tests and the desk-scale fixture we instead pretrain a
//! small backbone with a symmetric image-text InfoNCE objective on
//! procedurally drawn shapes (photos and sketches) and templated captions
//! naming shape, size, position and, for photos, color. An optional
//! image-image term pulls a sketch toward a photo of the same geometry,
//! standing in for the sketch-photo alignment a web-scale backbone brings.
//! The result is written once with [`DualEncoder::save`] and then loaded
//! frozen like any other backbone.

use candle_core::{DType, Device, Tensor, Var, D};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::normalize;
use super::{DualEncoder, EncoderConfig};
use crate::data::fixture::{render_photo, render_sketch, Geometry, COLORS, SHAPES};
use crate::error::Result;
use crate::nn::ParamValue;
use crate::optim::{AdamW, AdamWConfig, ParamGroup};
use crate::tokenizer::BpeTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Share of each batch drawn as sketches instead of photos.
    pub sketch_fraction: f64,
    /// Weight of the sketch-photo InfoNCE term over `batch_size / 2`
    /// extra geometries; 0 disables it.
    #[serde(default)]
    pub pair_weight: f64,
}

/// Merges shared by every surrogate backbone: learned from the bundled
/// phrase lists and the fixture caption vocabulary.
pub fn surrogate_tokenizer() -> BpeTokenizer {
    let corpus = crate::data::phrases::vocabulary_corpus();
    BpeTokenizer::train(corpus.iter().map(String::as_str), SURROGATE_MERGES)
}

pub const SURROGATE_MERGES: usize = 4000;

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 0.01,
            seed: 17,
            sketch_fraction: 0.4,
            pair_weight: 1.0,
        }
    }
}

pub fn size_word(g: &Geometry) -> Option<&'static str> {
    if g.size < 0.26 {
        Some("small")
    } else if g.size > 0.34 {
        Some("large")
    } else {
        None
    }
}

pub fn position_words(g: &Geometry) -> Vec<&'static str> {
    let mut out = Vec::new();
    if g.cy < 0.42 {
        out.push("at the top");
    } else if g.cy > 0.58 {
        out.push("at the bottom");
    }
    if g.cx < 0.42 {
        out.push("on the left");
    } else if g.cx > 0.58 {
        out.push("on the right");
    }
    if out.is_empty() {
        out.push("in the center");
    }
    out
}

/// Caption for a drawn shape. Each descriptive part is dropped with
/// probability `drop` so the text side also sees partial descriptions.
pub fn caption<R: Rng + ?Sized>(
    g: &Geometry,
    color: Option<usize>,
    drop: f64,
    rng: &mut R,
) -> String {
    let mut words = vec![if color.is_some() {
        "a photo of a"
    } else {
        "a sketch of a"
    }
    .to_string()];
    if let Some(s) = size_word(g) {
        if !rng.random_bool(drop) {
            words.push(s.to_string());
        }
    }
    words.push(SHAPES[g.shape].to_string());
    for p in position_words(g) {
        if !rng.random_bool(drop) {
            words.push(p.to_string());
        }
    }
    if let Some(c) = color {
        if !rng.random_bool(drop) {
            words.push(format!("with {} color", COLORS[c].0));
        }
    }
    words.join(" ")
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub caption: String,
}

pub fn sample<R: Rng + ?Sized>(rng: &mut R, side: u32, sketch_fraction: f64) -> Sample {
    let g = Geometry::random(rng);
    if rng.random_bool(sketch_fraction) {
        Sample {
            image: render_sketch(&g, side),
            caption: caption(&g, None, 0.2, rng),
        }
    } else {
        let c = rng.random_range(0..COLORS.len());
        Sample {
            image: render_photo(&g, COLORS[c].1, side),
            caption: caption(&g, Some(c), 0.2, rng),
        }
    }
}

fn image_batch(samples: &[Sample], res: usize, device: &Device) -> Result<Tensor> {
    let plane = res * res;
    let mut data = Vec::with_capacity(samples.len() * 3 * plane);
    for s in samples {
        let mut unit = vec![0f32; 3 * plane];
        for (i, px) in s.image.pixels().enumerate() {
            for c in 0..3 {
                unit[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        data.extend(normalize(&unit, res));
    }
    Ok(Tensor::from_vec(
        data,
        (samples.len(), 3, res, res),
        device,
    )?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_div(&x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)?)
}

/// Mean cross-entropy of each row of `logits` against its diagonal entry.
fn diagonal_cross_entropy(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dims()[0];
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits
        .broadcast_sub(&max)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        + &max)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = (logits * eye)?.sum_keepdim(D::Minus1)?;
    Ok((lse - diag)?.mean_all()?)
}

/// Sketches and photos of `n` fresh geometries, in matching order.
fn paired_batch<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    res: usize,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let side = res as u32;
    let mut sketches = Vec::with_capacity(n);
    let mut photos = Vec::with_capacity(n);
    for _ in 0..n {
        let g = Geometry::random(rng);
        let c = rng.random_range(0..COLORS.len());
        sketches.push(Sample {
            image: render_sketch(&g, side),
            caption: String::new(),
        });
        photos.push(Sample {
            image: render_photo(&g, COLORS[c].1, side),
            caption: String::new(),
        });
    }
    Ok((
        image_batch(&sketches, res, device)?,
        image_batch(&photos, res, device)?,
    ))
}

/// Pretrains a randomly initialized backbone. `on_step` receives the step
/// index and total loss.
pub fn pretrain(
    config: EncoderConfig,
    tokenizer: BpeTokenizer,
    cfg: &PretrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<DualEncoder> {
    let encoder =
        DualEncoder::random_unfrozen(config, tokenizer, cfg.seed, DType::F32, &Device::Cpu)?;
    continue_pretraining(encoder, cfg, on_step)
}

/// Runs the pretraining loop on `encoder`, which must have been built
/// with every parameter trainable.
pub fn continue_pretraining(
    encoder: DualEncoder,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<DualEncoder> {
    let device = encoder.device().clone();
    let logit_scale = Var::new(&[(1.0f32 / 0.07).ln()], &device)?;
    let mut params: Vec<(String, Var)> = encoder
        .params()
        .iter()
        .filter_map(|p| match &p.value {
            ParamValue::Trainable(v) => Some((p.name.clone(), v.clone())),
            ParamValue::Frozen(_) => None,
        })
        .collect();
    params.push(("logit_scale".into(), logit_scale.clone()));
    let mut opt = AdamW::new(
        vec![ParamGroup {
            name: "all".into(),
            lr: cfg.lr,
            params,
        }],
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            beta2: 0.98,
            eps: 1e-6,
            ..Default::default()
        },
    )?;
    let res = encoder.config().image_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for step in 0..cfg.steps {
        let samples: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| sample(&mut rng, res as u32, cfg.sketch_fraction))
            .collect();
        let images = image_batch(&samples, res, &device)?;
        let bodies = samples
            .iter()
            .map(|s| {
                Ok(encoder
                    .embed_ids(&encoder.token_ids(&s.caption))?
                    .embeddings)
            })
            .collect::<Result<Vec<_>>>()?;
        let img = unit_rows(&encoder.encode_images(&images)?.global)?;
        let txt = unit_rows(&encoder.encode_bodies(&bodies)?)?;
        let scale = logit_scale.as_tensor().clamp(0.0, 4.6)?.exp()?;
        let logits = img.matmul(&txt.t()?)?.broadcast_mul(&scale)?;
        let mut loss =
            ((diagonal_cross_entropy(&logits)? + diagonal_cross_entropy(&logits.t()?)?)? * 0.5)?;
        let pairs = cfg.batch_size / 2;
        if cfg.pair_weight > 0.0 && pairs > 1 {
            let (sk, ph) = paired_batch(&mut rng, pairs, res, &device)?;
            let sk = unit_rows(&encoder.encode_images(&sk)?.global)?;
            let ph = unit_rows(&encoder.encode_images(&ph)?.global)?;
            let logits = sk.matmul(&ph.t()?)?.broadcast_mul(&scale)?;
            let pair = ((diagonal_cross_entropy(&logits)?
                + diagonal_cross_entropy(&logits.t()?)?)?
                * 0.5)?;
            loss = (loss + (pair * cfg.pair_weight)?)?;
        }
        let value = loss.to_scalar::<f32>()? as f64;
        opt.step(&loss.backward()?, Some(1.0))?;
        on_step(step, value);
    }
    Ok(encoder)
}
