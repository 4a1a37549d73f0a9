//! Frozen dual encoder: a vision transformer exposing global and patch
//! features, a word-embedding table, and a causal text transformer that
//! accepts arbitrary token embeddings.
//!
//! Parameter names follow the Hugging Face CLIP layout, so a converted
//! `model.safetensors` plus the reference merges file load directly. Only
//! the layer norms of the vision tower are trainable; the word embeddings
//! and the whole text tower are frozen.

mod config;
pub mod preprocess;
pub mod pretrain;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor};
use sha2::{Digest, Sha256};

pub use config::EncoderConfig;

use crate::error::{DuetError, Result};
use crate::nn::{
    causal_mask, checksum, hex, EncoderLayer, Init, LayerNorm, Linear, ParamBuilder, ParamInfo,
    ParamSet,
};
use crate::tokenizer::BpeTokenizer;

const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "model.safetensors";
const MERGES_FILE: &str = "merges.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Sketch,
    Photo,
}

/// Global and patch-level features for a batch of images, produced by one
/// forward pass.
#[derive(Debug, Clone)]
pub struct VisualBatch {
    /// `(B, d)`
    pub global: Tensor,
    /// `(B, T, d)`
    pub patches: Tensor,
}

/// Features of a single image.
#[derive(Debug, Clone)]
pub struct VisualFeature {
    pub global: Tensor,
    pub patches: Tensor,
    pub source_kind: SourceKind,
}

/// Word-token embeddings `(L, text_width)`, never framed with start/end
/// markers; framing happens inside the text encoder.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub embeddings: Tensor,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor) -> Self {
        Self { embeddings }
    }

    pub fn len(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the first `len` tokens.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        Ok(Self::new(self.embeddings.narrow(
            0,
            0,
            len.min(self.len()),
        )?))
    }
}

struct VisionTower {
    patch_embedding: Tensor,
    class_embedding: Tensor,
    position_embedding: Tensor,
    pre_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    post_norm: LayerNorm,
    projection: Linear,
}

struct TextTower {
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    projection: Linear,
}

pub struct DualEncoder {
    config: EncoderConfig,
    tokenizer: BpeTokenizer,
    vision: VisionTower,
    text: TextTower,
    params: ParamSet,
    fingerprint: String,
    device: Device,
    dtype: DType,
}

impl std::fmt::Debug for DualEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualEncoder")
            .field("config", &self.config)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl DualEncoder {
    /// Seeded random initialization; used for surrogate backbones.
    pub fn random(
        config: EncoderConfig,
        tokenizer: BpeTokenizer,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let pb = ParamBuilder::random(seed, dtype, device);
        Self::build(config, tokenizer, pb)
    }

    /// Seeded random initialization with every parameter trainable, for
    /// surrogate pretraining only. Saving and reloading yields the usual
    /// frozen layout.
    pub fn random_unfrozen(
        config: EncoderConfig,
        tokenizer: BpeTokenizer,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let pb = ParamBuilder::random(seed, dtype, device).train_everything();
        Self::build(config, tokenizer, pb)
    }

    pub fn from_weights(
        config: EncoderConfig,
        tokenizer: BpeTokenizer,
        weights: HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let pb = ParamBuilder::loaded(weights, dtype, device);
        Self::build(config, tokenizer, pb)
    }

    /// Loads `config.json`, `model.safetensors` and `merges.txt` from `dir`.
    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::load_with(dir, dtype, device, false)
    }

    /// Like [`DualEncoder::load`] with every parameter trainable, for
    /// continuing surrogate pretraining.
    pub fn load_unfrozen(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::load_with(dir, dtype, device, true)
    }

    fn load_with(dir: &Path, dtype: DType, device: &Device, unfrozen: bool) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let config: EncoderConfig = serde_json::from_str(
            &std::fs::read_to_string(&config_path).map_err(|e| DuetError::load(&config_path, e))?,
        )?;
        let merge_limit = config.vocab_size.checked_sub(514);
        let tokenizer = BpeTokenizer::load(&dir.join(MERGES_FILE), merge_limit)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let weights = candle_core::safetensors::load(&weights_path, device)
            .map_err(|e| DuetError::load(&weights_path, e))?;
        let mut pb = ParamBuilder::loaded(weights, dtype, device);
        if unfrozen {
            pb = pb.train_everything();
        }
        Self::build(config, tokenizer, pb)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        std::fs::write(dir.join(MERGES_FILE), self.tokenizer.merges_to_string())?;
        let map: HashMap<String, Tensor> = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), p.tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&map, dir.join(WEIGHTS_FILE))?;
        Ok(())
    }

    fn build(config: EncoderConfig, tokenizer: BpeTokenizer, mut pb: ParamBuilder) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(DuetError::Config(format!(
                "tokenizer has {} entries but backbone expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let c = &config;
        let p = c.patch_size;
        let vw = c.vision_width;
        let tw = c.text_width;

        let patch_embedding = pb.get(
            "vision_model.embeddings.patch_embedding.weight",
            &[vw, 3, p, p],
            Init::Normal((1.0 / (3 * p * p) as f64).sqrt()),
            false,
        )?;
        let class_embedding = pb.get(
            "vision_model.embeddings.class_embedding",
            &[vw],
            Init::Normal(0.02),
            false,
        )?;
        let position_embedding = pb.get(
            "vision_model.embeddings.position_embedding.weight",
            &[c.patch_count() + 1, vw],
            Init::Normal(0.02),
            false,
        )?;
        let pre_norm = LayerNorm::new(&mut pb, "vision_model.pre_layrnorm", vw, true)?;
        let layers = (0..c.vision_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut pb,
                    &format!("vision_model.encoder.layers.{i}"),
                    vw,
                    c.vision_heads,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let post_norm = LayerNorm::new(&mut pb, "vision_model.post_layernorm", vw, true)?;
        let projection = Linear::new(&mut pb, "visual_projection", vw, c.embed_dim, false, false)?;
        let vision = VisionTower {
            patch_embedding: patch_embedding.reshape((vw, 3 * p * p))?,
            class_embedding,
            position_embedding,
            pre_norm,
            layers,
            post_norm,
            projection,
        };

        let token_embedding = pb.get(
            "text_model.embeddings.token_embedding.weight",
            &[c.vocab_size, tw],
            Init::Normal(0.02),
            false,
        )?;
        let text_position = pb.get(
            "text_model.embeddings.position_embedding.weight",
            &[c.context_length, tw],
            Init::Normal(0.01),
            false,
        )?;
        let layers = (0..c.text_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut pb,
                    &format!("text_model.encoder.layers.{i}"),
                    tw,
                    c.text_heads,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut pb, "text_model.final_layer_norm", tw, false)?;
        let text_projection =
            Linear::new(&mut pb, "text_projection", tw, c.embed_dim, false, false)?;
        let text = TextTower {
            token_embedding,
            position_embedding: text_position,
            layers,
            final_norm,
            projection: text_projection,
        };

        let device = pb.device().clone();
        let dtype = pb.dtype();
        let params = pb.finish();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&config)?);
        hasher.update(tokenizer.merges_to_string().as_bytes());
        hasher.update(checksum(params.iter().map(|p| (p.name.as_str(), p.tensor())))?.as_bytes());
        let fingerprint = hex(&hasher.finalize());

        Ok(Self {
            config,
            tokenizer,
            vision,
            text,
            params,
            fingerprint,
            device,
            dtype,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &BpeTokenizer {
        &self.tokenizer
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Hash of the backbone as loaded (config, merges, initial weights).
    pub fn base_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// The vision-tower layer norms; everything else is frozen.
    pub fn trainable_parameters(&self) -> Vec<ParamInfo> {
        ParamSet::infos(self.params.trainable().map(|(n, v)| (n, v.as_tensor())))
    }

    /// Restores trained layer-norm values; other entries of `weights` are
    /// ignored.
    pub fn set_trainable(&self, weights: &HashMap<String, Tensor>) -> Result<()> {
        self.params.assign_trainable(weights)
    }

    pub fn frozen_checksum(&self) -> Result<String> {
        checksum(self.params.frozen())
    }

    pub fn trainable_checksum(&self) -> Result<String> {
        checksum(self.params.trainable().map(|(n, v)| (n, v.as_tensor())))
    }

    /// Encodes a `(B, 3, r, r)` batch of normalized images.
    pub fn encode_images(&self, images: &Tensor) -> Result<VisualBatch> {
        let c = &self.config;
        let r = c.image_resolution;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != r || dims[3] != r {
            return Err(DuetError::Config(format!(
                "expected images of shape (B, 3, {r}, {r}), got {dims:?}"
            )));
        }
        ensure_finite(images, "image")?;
        let b = dims[0];
        let p = c.patch_size;
        let side = r / p;
        let vw = c.vision_width;
        let v = &self.vision;

        let patches = images
            .reshape((b, 3, side, p, side, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, side * side, 3 * p * p))?;
        let tokens = patches.broadcast_matmul(&v.patch_embedding.t()?)?;
        let cls = v
            .class_embedding
            .reshape((1, 1, vw))?
            .broadcast_as((b, 1, vw))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&v.position_embedding)?;
        let mut x = v.pre_norm.forward(&x)?;
        for layer in &v.layers {
            x = layer.forward(&x, None)?;
        }
        let x = v.post_norm.forward(&x)?;
        let global = v.projection.forward(&x.i((.., 0, ..))?.contiguous()?)?;
        let patches = v
            .projection
            .forward(&x.narrow(1, 1, side * side)?.contiguous()?)?;
        Ok(VisualBatch { global, patches })
    }

    /// Encodes one `(3, r, r)` image.
    pub fn encode_image(&self, image: &Tensor, kind: SourceKind) -> Result<VisualFeature> {
        let batch = self.encode_images(&image.unsqueeze(0)?)?;
        Ok(VisualFeature {
            global: batch.global.squeeze(0)?,
            patches: batch.patches.squeeze(0)?,
            source_kind: kind,
        })
    }

    /// Maximum number of body tokens once start/end markers are added.
    pub fn max_body_tokens(&self) -> usize {
        self.config.context_length - 2
    }

    /// Word-token embeddings for `text`, without the text transformer.
    pub fn embed_words(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(DuetError::Input("text is empty".into()));
        }
        let mut ids = self.tokenizer.encode(text);
        if ids.len() > self.max_body_tokens() {
            log::warn!(
                "text {:?} has {} tokens, truncating to {}",
                text,
                ids.len(),
                self.max_body_tokens()
            );
            ids.truncate(self.max_body_tokens());
        }
        self.embed_ids(&ids)
    }

    /// Token ids for `text`, truncated to the body budget.
    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.max_body_tokens());
        ids
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<TokenSequence> {
        let idx = Tensor::new(ids, &self.device)?;
        Ok(TokenSequence::new(
            self.text.token_embedding.index_select(&idx, 0)?,
        ))
    }

    fn special_embedding(&self, id: u32) -> Result<Tensor> {
        Ok(self.text.token_embedding.narrow(0, id as usize, 1)?)
    }

    /// Runs the frozen text transformer over one token body.
    pub fn encode_sequence(&self, seq: &TokenSequence) -> Result<Tensor> {
        Ok(self
            .encode_bodies(std::slice::from_ref(&seq.embeddings))?
            .squeeze(0)?)
    }

    /// Frames each `(L_i, w)` body with start/end markers, pads the batch,
    /// and returns the projected end-marker states as a `(B, d)` tensor.
    /// Padding sits after the end marker, so the causal mask keeps it out of
    /// the pooled state.
    pub fn encode_bodies(&self, bodies: &[Tensor]) -> Result<Tensor> {
        if bodies.is_empty() {
            return Err(DuetError::Input("no sequences to encode".into()));
        }
        let tw = self.config.text_width;
        let sot = self.special_embedding(self.tokenizer.start_id())?;
        let eot = self.special_embedding(self.tokenizer.end_id())?;
        let framed_len = |b: &Tensor| b.dims()[0] + 2;
        let max_len = bodies.iter().map(framed_len).max().unwrap_or(2);
        if max_len > self.config.context_length {
            return Err(DuetError::Input(format!(
                "sequence of {} tokens exceeds context length {}",
                max_len, self.config.context_length
            )));
        }
        let mut rows = Vec::with_capacity(bodies.len());
        let mut pool = vec![0f32; bodies.len() * max_len];
        for (i, body) in bodies.iter().enumerate() {
            if body.rank() != 2 || body.dims()[1] != tw {
                return Err(DuetError::shape(
                    format!("(L, {tw})"),
                    format!("{:?}", body.dims()),
                ));
            }
            let len = framed_len(body);
            let mut parts = vec![sot.clone(), body.clone(), eot.clone()];
            if len < max_len {
                parts.push(Tensor::zeros(
                    (max_len - len, tw),
                    self.dtype,
                    &self.device,
                )?);
            }
            rows.push(Tensor::cat(&parts, 0)?);
            pool[i * max_len + len - 1] = 1.0;
        }
        let pool = Tensor::from_vec(pool, (bodies.len(), 1, max_len), &self.device)?
            .to_dtype(self.dtype)?;
        self.run_text(&Tensor::stack(&rows, 0)?, &pool)
    }

    fn run_text(&self, embeddings: &Tensor, pool: &Tensor) -> Result<Tensor> {
        let (_, len, _) = embeddings.dims3()?;
        let pos = self.text.position_embedding.narrow(0, 0, len)?;
        let mut x = embeddings.broadcast_add(&pos)?;
        let mask = causal_mask(len, self.dtype, &self.device)?;
        for layer in &self.text.layers {
            x = layer.forward(&x, Some(&mask))?;
        }
        let x = self.text.final_norm.forward(&x)?;
        let pooled = pool.matmul(&x)?.squeeze(1)?;
        self.text.projection.forward(&pooled)
    }

    /// Reference text path: token ids through the embedding table, pooled
    /// at the end-of-text marker.
    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        let ids = self.tokenizer.encode_framed(text);
        if ids.len() > self.config.context_length {
            return Err(DuetError::Input(format!(
                "text has {} tokens, context is {}",
                ids.len(),
                self.config.context_length
            )));
        }
        let eot_pos = ids
            .iter()
            .position(|&t| t == self.tokenizer.end_id())
            .unwrap_or(ids.len() - 1);
        let len = ids.len();
        let idx = Tensor::new(ids.as_slice(), &self.device)?;
        let emb = self
            .text
            .token_embedding
            .index_select(&idx, 0)?
            .unsqueeze(0)?;
        let mut pool = vec![0f32; len];
        pool[eot_pos] = 1.0;
        let pool = Tensor::from_vec(pool, (1, 1, len), &self.device)?.to_dtype(self.dtype)?;
        Ok(self.run_text(&emb, &pool)?.squeeze(0)?)
    }

    /// Batched form of [`encode_text`](Self::encode_text), `(B, d)`.
    pub fn encode_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let rows = texts
            .iter()
            .map(|t| self.encode_text(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t
        .to_dtype(DType::F64)?
        .abs()?
        .sum_all()?
        .to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(DuetError::Input(format!(
            "{what} contains NaN or infinite values"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::tiny_encoder;

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        let a = a.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        let b = b.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn image(enc: &DualEncoder, seed: u64) -> Tensor {
        let r = enc.config().image_resolution;
        let data: Vec<f32> = (0..3 * r * r)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        Tensor::from_vec(data, (3, r, r), enc.device())
            .unwrap()
            .to_dtype(enc.dtype())
            .unwrap()
    }

    #[test]
    fn image_features_have_configured_shapes_and_are_deterministic() {
        let enc = tiny_encoder(DType::F32);
        let img = image(&enc, 1);
        let a = enc.encode_image(&img, SourceKind::Photo).unwrap();
        let b = enc.encode_image(&img, SourceKind::Photo).unwrap();
        let c = enc.config();
        assert_eq!(a.patches.dims(), &[c.patch_count(), c.embed_dim]);
        assert_eq!(a.global.dims(), &[c.embed_dim]);
        assert_eq!(
            a.global.to_vec1::<f32>().unwrap(),
            b.global.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn one_pixel_perturbation_barely_moves_the_global_feature() {
        let enc = tiny_encoder(DType::F32);
        let img = image(&enc, 3);
        let mut data = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        data[5] += 0.1;
        let perturbed = Tensor::from_vec(data, img.dims(), enc.device()).unwrap();
        let a = enc.encode_image(&img, SourceKind::Sketch).unwrap().global;
        let b = enc
            .encode_image(&perturbed, SourceKind::Sketch)
            .unwrap()
            .global;
        assert!(cosine(&a, &b) > 0.99);
    }

    #[test]
    fn wrong_size_and_nan_images_are_rejected() {
        let enc = tiny_encoder(DType::F32);
        let bad = Tensor::zeros((3, 5, 5), DType::F32, enc.device()).unwrap();
        assert!(matches!(
            enc.encode_image(&bad, SourceKind::Photo),
            Err(DuetError::Config(_))
        ));
        let r = enc.config().image_resolution;
        let mut data = vec![0f32; 3 * r * r];
        data[0] = f32::NAN;
        let nan = Tensor::from_vec(data, (3, r, r), enc.device()).unwrap();
        assert!(matches!(
            enc.encode_image(&nan, SourceKind::Photo),
            Err(DuetError::Input(_))
        ));
    }

    #[test]
    fn embed_words_matches_tokenizer_count() {
        let enc = tiny_encoder(DType::F32);
        let seq = enc.embed_words("a photo of").unwrap();
        assert_eq!(seq.len(), enc.tokenizer().encode("a photo of").len());
        assert_eq!(seq.len(), 3);
        assert!(matches!(enc.embed_words("   "), Err(DuetError::Input(_))));
        let again = enc.embed_words("a photo of").unwrap();
        assert_eq!(
            seq.embeddings.to_vec2::<f32>().unwrap(),
            again.embeddings.to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn embedding_path_matches_reference_text_path() {
        let enc = tiny_encoder(DType::F32);
        let text = "a photo of a shoe";
        let via_embeddings = enc
            .encode_sequence(&enc.embed_words(text).unwrap())
            .unwrap();
        let reference = enc.encode_text(text).unwrap();
        assert!(cosine(&via_embeddings, &reference) >= 0.999);
    }

    #[test]
    fn padding_does_not_leak_into_pooled_state() {
        let enc = tiny_encoder(DType::F64);
        let short = enc.embed_words("as doodles").unwrap();
        let long = enc
            .embed_words("with a line drawing of pencil curves")
            .unwrap();
        let alone = enc
            .encode_sequence(&short)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let batched = enc
            .encode_bodies(&[short.embeddings.clone(), long.embeddings.clone()])
            .unwrap()
            .get(0)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (a, b) in alone.iter().zip(&batched) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn different_phrases_encode_differently() {
        let enc = tiny_encoder(DType::F32);
        let a = enc
            .encode_sequence(&enc.embed_words("in abstract lines").unwrap())
            .unwrap();
        let b = enc
            .encode_sequence(&enc.embed_words("as sparse contours").unwrap())
            .unwrap();
        assert_ne!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn over_length_sequence_is_an_error() {
        let enc = tiny_encoder(DType::F32);
        let tw = enc.config().text_width;
        let body = Tensor::zeros(
            (enc.config().context_length - 1, tw),
            DType::F32,
            enc.device(),
        )
        .unwrap();
        assert!(enc.encode_sequence(&TokenSequence::new(body)).is_err());
    }

    #[test]
    fn only_vision_layer_norms_are_trainable() {
        let enc = tiny_encoder(DType::F32);
        let trainable = enc.trainable_parameters();
        assert!(!trainable.is_empty());
        for p in &trainable {
            assert!(p.name.starts_with("vision_model."), "{}", p.name);
            assert!(
                p.name.contains("norm") || p.name.contains("layrnorm"),
                "{}",
                p.name
            );
        }
        assert!(enc
            .params()
            .iter()
            .filter(|p| p.name.starts_with("text_model."))
            .all(|p| !p.is_trainable()));
        let count: usize = trainable.iter().map(|p| p.numel).sum();
        assert!((count as f64) < 0.05 * enc.params().total_numel() as f64);
    }

    #[test]
    fn save_and_load_round_trip() {
        let enc = tiny_encoder(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        enc.save(dir.path()).unwrap();
        let back = DualEncoder::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.base_fingerprint(), enc.base_fingerprint());
        let a = enc
            .encode_text("a photo of")
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = back
            .encode_text("a photo of")
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unfrozen_load_makes_every_parameter_trainable() {
        let enc = tiny_encoder(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        enc.save(dir.path()).unwrap();
        let back = DualEncoder::load_unfrozen(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert!(back.params().iter().all(|p| p.is_trainable()));
        assert_eq!(back.base_fingerprint(), enc.base_fingerprint());
    }
}
