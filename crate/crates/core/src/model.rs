//! The assembled retrieval model: frozen dual encoder plus the inversion
//! composer, and the inference-time query path.

use candle_core::{DType, Tensor, D};
use image::DynamicImage;
use sha2::{Digest, Sha256};

use crate::composer::{InversionComposer, Prompt};
use crate::data::phrases::{PhraseBook, PhraseKind};
use crate::encoder::preprocess::image_tensor;
use crate::encoder::{DualEncoder, TokenSequence, VisualBatch};
use crate::error::{DuetError, Result};
use crate::nn::{checksum, hex};

pub const DEFAULT_CONNECTOR: &str = "with";

#[derive(Debug)]
pub struct DuetModel {
    encoder: DualEncoder,
    composer: InversionComposer,
    phrases: PhraseBook,
}

/// Scales each row (or a single vector) to unit length.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

impl DuetModel {
    pub fn new(encoder: DualEncoder, composer: InversionComposer) -> Self {
        Self {
            encoder,
            composer,
            phrases: PhraseBook::default(),
        }
    }

    pub fn with_phrases(mut self, phrases: PhraseBook) -> Self {
        self.phrases = phrases;
        self
    }

    pub fn encoder(&self) -> &DualEncoder {
        &self.encoder
    }

    pub fn composer(&self) -> &InversionComposer {
        &self.composer
    }

    pub fn phrases(&self) -> &PhraseBook {
        &self.phrases
    }

    /// Hash of everything that shapes inference outputs: the base backbone
    /// and the current values of the trained inference parameters (vision
    /// layer norms, converter, prompt).
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.encoder.base_fingerprint().as_bytes());
        h.update(self.encoder.trainable_checksum()?.as_bytes());
        h.update(
            checksum(
                self.composer
                    .params()
                    .iter()
                    .map(|p| (p.name.as_str(), p.tensor())),
            )?
            .as_bytes(),
        );
        Ok(hex(&h.finalize()))
    }

    /// The text tail appended after the pseudo-word token. With text and no
    /// connector, `with` is inserted unless the text already opens with a
    /// connecting word. Connectors outside the bundled list are passed
    /// through with a warning.
    pub fn query_tail(&self, text: Option<&str>, connector: Option<&str>) -> Option<String> {
        let text = text.map(str::trim).filter(|t| !t.is_empty())?;
        let connectors = self.phrases.get(PhraseKind::ConnectingWord);
        match connector.map(str::trim) {
            Some("") => Some(text.to_string()),
            Some(c) => {
                if !connectors.contains(c) {
                    log::warn!(
                        "connector {c:?} is not in the connecting-word list; using it as given"
                    );
                }
                Some(format!("{c} {text}"))
            }
            None => {
                let first = text
                    .split_whitespace()
                    .next()
                    .unwrap_or_default()
                    .to_lowercase();
                if connectors.contains(&first) {
                    Some(text.to_string())
                } else {
                    Some(format!("{DEFAULT_CONNECTOR} {text}"))
                }
            }
        }
    }

    /// Encodes model-ready images, `(B, 3, r, r)`.
    pub fn encode_images(&self, images: &Tensor) -> Result<VisualBatch> {
        self.encoder.encode_images(images)
    }

    /// Composed query features for `(B, d)` sketch globals, one optional
    /// tail per item. Not normalized.
    pub fn compose_queries(
        &self,
        sketch_globals: &Tensor,
        tails: &[Option<TokenSequence>],
    ) -> Result<Tensor> {
        let pseudo = self.composer.invert_batch(sketch_globals)?;
        let b = pseudo.dims()[0];
        if tails.len() != b {
            return Err(DuetError::shape(format!("{b} tails"), tails.len()));
        }
        let bodies = (0..b)
            .map(|i| {
                Ok(self
                    .composer
                    .compose(Prompt::Learned, &pseudo.get(i)?, tails[i].as_ref())?
                    .body
                    .embeddings)
            })
            .collect::<Result<Vec<_>>>()?;
        self.encoder.encode_bodies(&bodies)
    }

    /// Unit-normalized composed query for one model-ready `(3, r, r)` sketch.
    pub fn query_from_tensor(
        &self,
        sketch: &Tensor,
        text: Option<&str>,
        connector: Option<&str>,
    ) -> Result<Tensor> {
        let global = self.encoder.encode_images(&sketch.unsqueeze(0)?)?.global;
        let tail = match self.query_tail(text, connector) {
            Some(t) => Some(self.encoder.embed_words(&t)?),
            None => None,
        };
        let q = self.compose_queries(&global, &[tail])?.squeeze(0)?;
        l2_normalize(&q)
    }

    /// `s^{T,q}_L` for a sketch image with optional text and connector.
    pub fn build_inference_query(
        &self,
        sketch: &DynamicImage,
        text: Option<&str>,
        connector: Option<&str>,
    ) -> Result<Tensor> {
        let r = self.encoder.config().image_resolution;
        let t = image_tensor(sketch, r, self.encoder.dtype(), self.encoder.device())?;
        self.query_from_tensor(&t, text, connector)
    }

    /// Unit-normalized global features of model-ready photos.
    pub fn encode_gallery(&self, photos: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.encoder.encode_images(photos)?.global)
    }

    pub fn image_tensor(&self, img: &DynamicImage) -> Result<Tensor> {
        image_tensor(
            img,
            self.encoder.config().image_resolution,
            self.encoder.dtype(),
            self.encoder.device(),
        )
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ComposerConfig;
    use crate::testing::tiny_encoder;

    fn model() -> DuetModel {
        let enc = tiny_encoder(DType::F32);
        let comp = InversionComposer::new(&enc, ComposerConfig::default(), 3).unwrap();
        DuetModel::new(enc, comp)
    }

    fn sketch(m: &DuetModel) -> Tensor {
        let r = m.encoder().config().image_resolution;
        let v: Vec<f32> = (0..3 * r * r)
            .map(|i| ((i * 37 % 11) as f32 / 5.0) - 1.0)
            .collect();
        Tensor::from_vec(v, (3, r, r), m.encoder().device()).unwrap()
    }

    #[test]
    fn connector_defaults_and_pass_through() {
        let m = model();
        assert_eq!(m.query_tail(None, Some("in")), None);
        assert_eq!(m.query_tail(Some("  "), None), None);
        assert_eq!(
            m.query_tail(Some("red laces"), None).unwrap(),
            "with red laces"
        );
        assert_eq!(
            m.query_tail(Some("with red laces"), None).unwrap(),
            "with red laces"
        );
        assert_eq!(
            m.query_tail(Some("origami"), Some("in")).unwrap(),
            "in origami"
        );
        assert_eq!(m.query_tail(Some("origami"), Some("")).unwrap(), "origami");
        assert_eq!(
            m.query_tail(Some("origami"), Some("via")).unwrap(),
            "via origami"
        );
    }

    #[test]
    fn query_is_unit_and_matches_degenerate_tail() {
        let m = model();
        let s = sketch(&m);
        let q = m.query_from_tensor(&s, None, None).unwrap();
        let n: f32 = q.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
        let global = m
            .encoder()
            .encode_images(&s.unsqueeze(0).unwrap())
            .unwrap()
            .global;
        let token = m.composer().invert_batch(&global).unwrap().get(0).unwrap();
        let body = m
            .composer()
            .compose(Prompt::Learned, &token, None)
            .unwrap()
            .body;
        let direct = l2_normalize(&m.encoder().encode_sequence(&body).unwrap()).unwrap();
        assert_eq!(
            q.to_vec1::<f32>().unwrap(),
            direct.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn different_text_changes_the_query() {
        let m = model();
        let s = sketch(&m);
        let a = m
            .query_from_tensor(&s, Some("with red laces"), None)
            .unwrap();
        let b = m
            .query_from_tensor(&s, Some("with blue laces"), None)
            .unwrap();
        let cos: f32 = (a * b).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(cos < 1.0 - 1e-4, "{cos}");
    }

    #[test]
    fn fingerprint_tracks_trained_parameters() {
        let m = model();
        let before = m.fingerprint().unwrap();
        assert_eq!(before, m.fingerprint().unwrap());
        let (_, var) = m.composer().params().trainable().next().unwrap();
        var.set(&(var.as_tensor() + 1.0).unwrap()).unwrap();
        assert_ne!(before, m.fingerprint().unwrap());
    }
}
