//! Visual-to-word inversion and query composition.
//!
//! A sketch's global visual feature is mapped by a three-layer MLP into the
//! word-embedding space of the text encoder, giving a pseudo-word token.
//! Queries are then assembled as `learned prompt ‖ pseudo-word ‖ tail`,
//! where the tail is nothing, a difference token, a neutral phrase, or user
//! text. Tokens are positional: the causal text transformer sees them in
//! exactly this order.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, TokenSequence};
use crate::error::{DuetError, Result};
use crate::nn::{Init, Linear, ParamBuilder, ParamInfo, ParamSet};

pub const PROMPT_LEN: usize = 3;
pub const PROMPT_INIT: &str = "a photo of";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposerConfig {
    /// Hidden width of the converter; `None` means `2 * d`.
    pub hidden: Option<usize>,
    /// Pseudo-word tokens produced per image. One is the default; larger
    /// values widen the converter's output head.
    pub pseudo_tokens: usize,
    pub init_std: f64,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            pseudo_tokens: 1,
            init_std: 0.02,
        }
    }
}

/// Three affine layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Converter {
    layers: [Linear; 3],
    in_dim: usize,
    token_width: usize,
    tokens: usize,
}

impl Converter {
    fn new(
        pb: &mut ParamBuilder,
        in_dim: usize,
        token_width: usize,
        cfg: &ComposerConfig,
    ) -> Result<Self> {
        let hidden = cfg.hidden.unwrap_or(2 * in_dim);
        let out = token_width * cfg.pseudo_tokens;
        let dims = [(in_dim, hidden), (hidden, hidden), (hidden, out)];
        let mut layers = Vec::with_capacity(3);
        for (i, (din, dout)) in dims.into_iter().enumerate() {
            let name = format!("converter.layers.{i}");
            let std = if i == 2 {
                cfg.init_std
            } else {
                (2.0 / din as f64).sqrt()
            };
            let w = pb.get(
                &format!("{name}.weight"),
                &[dout, din],
                Init::Normal(std),
                true,
            )?;
            let b = pb.get(&format!("{name}.bias"), &[dout], Init::Zeros, true)?;
            layers.push(Linear::from_parts(w, Some(b)));
        }
        let layers: [Linear; 3] = layers.try_into().expect("three layers");
        Ok(Self {
            layers,
            in_dim,
            token_width,
            tokens: cfg.pseudo_tokens,
        })
    }

    /// Maps `(B, d)` features to `(B, tokens, w)` pseudo-word embeddings.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = x.dims2()?;
        if d != self.in_dim {
            return Err(DuetError::Config(format!(
                "converter expects width {}, got {d}",
                self.in_dim
            )));
        }
        let h = self.layers[0].forward(x)?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        let out = self.layers[2].forward(&h)?;
        Ok(out.reshape((b, self.tokens, self.token_width))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sketch,
    Difference,
}

/// One or more word-space embeddings produced by the converter, `(n, w)`.
#[derive(Debug, Clone)]
pub struct PseudoWordToken {
    pub embedding: Tensor,
    pub provenance: Provenance,
}

/// What goes in front of the pseudo-word token.
#[derive(Debug, Clone, Copy)]
pub enum Prompt<'a> {
    Learned,
    Fixed(&'a TokenSequence),
}

/// A token body ready for the text encoder.
#[derive(Debug, Clone)]
pub struct ComposedQuery {
    pub body: TokenSequence,
    /// Tail tokens dropped to fit the context.
    pub dropped: usize,
}

/// Owns the converter and the learned prompt.
#[derive(Debug, Clone)]
pub struct InversionComposer {
    converter: Converter,
    prompt: Tensor,
    params: ParamSet,
    config: ComposerConfig,
    max_body_tokens: usize,
}

impl InversionComposer {
    /// Fresh converter (seeded) and a prompt initialized from the word
    /// embeddings of "a photo of".
    pub fn new(encoder: &DualEncoder, config: ComposerConfig, seed: u64) -> Result<Self> {
        let init = encoder.embed_words(PROMPT_INIT)?.embeddings;
        let init = fit_rows(&init, PROMPT_LEN)?;
        let mut pb = ParamBuilder::random(seed, encoder.dtype(), encoder.device());
        let converter = Converter::new(
            &mut pb,
            encoder.config().embed_dim,
            encoder.config().text_width,
            &config,
        )?;
        let mut params = pb.finish();
        let prompt_var = Var::from_tensor(&init)?;
        let prompt = prompt_var.as_tensor().clone();
        params.push(crate::nn::Param {
            name: "prompt.learned".to_string(),
            value: crate::nn::ParamValue::Trainable(prompt_var),
        });
        Ok(Self {
            converter,
            prompt,
            params,
            config,
            max_body_tokens: encoder.max_body_tokens(),
        })
    }

    /// Rebuilds from saved tensors (converter layers and `prompt.learned`).
    pub fn from_weights(
        encoder: &DualEncoder,
        config: ComposerConfig,
        weights: std::collections::HashMap<String, Tensor>,
    ) -> Result<Self> {
        let prompt = weights
            .get("prompt.learned")
            .ok_or_else(|| DuetError::Config("checkpoint lacks prompt.learned".into()))?
            .to_dtype(encoder.dtype())?;
        if prompt.dims() != [PROMPT_LEN, encoder.config().text_width] {
            return Err(DuetError::shape(
                format!("({PROMPT_LEN}, {})", encoder.config().text_width),
                format!("{:?}", prompt.dims()),
            ));
        }
        let mut pb = ParamBuilder::loaded(weights, encoder.dtype(), encoder.device());
        let converter = Converter::new(
            &mut pb,
            encoder.config().embed_dim,
            encoder.config().text_width,
            &config,
        )?;
        let mut params = pb.finish();
        let prompt_var = Var::from_tensor(&prompt)?;
        let prompt = prompt_var.as_tensor().clone();
        params.push(crate::nn::Param {
            name: "prompt.learned".to_string(),
            value: crate::nn::ParamValue::Trainable(prompt_var),
        });
        Ok(Self {
            converter,
            prompt,
            params,
            config,
            max_body_tokens: encoder.max_body_tokens(),
        })
    }

    pub fn config(&self) -> &ComposerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        ParamSet::infos(self.params.iter().map(|p| (p.name.as_str(), p.tensor())))
    }

    /// `(3, w)` learned prompt.
    pub fn prompt(&self) -> &Tensor {
        &self.prompt
    }

    /// Batched inversion of `(B, d)` features into `(B, n, w)` tokens.
    pub fn invert_batch(&self, features: &Tensor) -> Result<Tensor> {
        self.converter.forward(features)
    }

    /// Pseudo-word token for one `(d)` visual feature.
    pub fn invert(&self, feature: &Tensor) -> Result<PseudoWordToken> {
        if feature.rank() != 1 {
            return Err(DuetError::Config(format!(
                "expected a feature vector, got shape {:?}",
                feature.dims()
            )));
        }
        let out = self.converter.forward(&feature.unsqueeze(0)?)?.squeeze(0)?;
        Ok(PseudoWordToken {
            embedding: out,
            provenance: Provenance::Sketch,
        })
    }

    /// Converter output on `|photo - sketch|`, sharing the inversion weights.
    /// `sketch` is the raw visual feature, not its pseudo-word token.
    pub fn difference_token(&self, photo: &Tensor, sketch: &Tensor) -> Result<PseudoWordToken> {
        if photo.dims() != sketch.dims() {
            return Err(DuetError::shape(
                format!("{:?}", photo.dims()),
                format!("{:?}", sketch.dims()),
            ));
        }
        let mut token = self.invert(&(photo - sketch)?.abs()?)?;
        token.provenance = Provenance::Difference;
        Ok(token)
    }

    /// Batched difference tokens, `(B, n, w)`.
    pub fn difference_batch(&self, photos: &Tensor, sketches: &Tensor) -> Result<Tensor> {
        self.converter.forward(&(photos - sketches)?.abs()?)
    }

    /// Concatenates `prompt ‖ pseudo ‖ tail`. When the result does not fit
    /// the context, tail tokens are dropped from the right; the prompt and
    /// pseudo-word token are never cut.
    pub fn compose(
        &self,
        prompt: Prompt<'_>,
        pseudo: &Tensor,
        tail: Option<&TokenSequence>,
    ) -> Result<ComposedQuery> {
        if pseudo.rank() != 2 || pseudo.dims()[0] == 0 {
            return Err(DuetError::Input(
                "a pseudo-word token is required to compose a query".into(),
            ));
        }
        let head = match prompt {
            Prompt::Learned => self.prompt.clone(),
            Prompt::Fixed(seq) => seq.embeddings.clone(),
        };
        let fixed_len = head.dims()[0] + pseudo.dims()[0];
        if fixed_len > self.max_body_tokens {
            return Err(DuetError::Input(format!(
                "prompt and pseudo-word need {fixed_len} tokens, context allows {}",
                self.max_body_tokens
            )));
        }
        let mut parts = vec![head, pseudo.clone()];
        let mut dropped = 0;
        if let Some(tail) = tail {
            let room = self.max_body_tokens - fixed_len;
            let keep = tail.len().min(room);
            dropped = tail.len() - keep;
            if dropped > 0 {
                log::warn!("composed query too long, dropping {dropped} trailing text tokens");
            }
            if keep > 0 {
                parts.push(tail.embeddings.narrow(0, 0, keep)?);
            }
        }
        Ok(ComposedQuery {
            body: TokenSequence::new(Tensor::cat(&parts, 0)?),
            dropped,
        })
    }
}

fn fit_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    let have = t.dims()[0];
    if have >= rows {
        Ok(t.narrow(0, 0, rows)?)
    } else {
        let last = t.narrow(0, have - 1, 1)?;
        let mut parts = vec![t.clone()];
        parts.extend(std::iter::repeat_n(last, rows - have));
        Ok(Tensor::cat(&parts, 0)?)
    }
}
