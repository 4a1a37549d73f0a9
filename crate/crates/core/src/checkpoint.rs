//! Checkpoint layout.
//!
//! ```text
//! <dir>/
//!   model.json               backbone location, fingerprints, configs
//!   trainable.safetensors    vision layer norms, converter, prompt
//!   decoder.safetensors      reconstruction decoder (training only)
//!   optimizer.safetensors    AdamW moments
//!   optimizer.json           AdamW step counter
//!   state.json               epoch / step position and best metric
//!   config.toml              the training configuration that produced it
//! ```
//!
//! Inference needs only `model.json`, `trainable.safetensors` and the
//! backbone directory named in `model.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::composer::{ComposerConfig, InversionComposer};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::DualEncoder;
use crate::error::{DuetError, Result};
use crate::model::DuetModel;

pub const MODEL_FILE: &str = "model.json";
pub const TRAINABLE_FILE: &str = "trainable.safetensors";
pub const DECODER_FILE: &str = "decoder.safetensors";
pub const OPTIMIZER_STEM: &str = "optimizer";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub format_version: u32,
    /// Backbone directory, absolute when written by the trainer.
    pub backbone: PathBuf,
    pub backbone_id: String,
    pub base_fingerprint: String,
    pub fingerprint: String,
    pub composer: ComposerConfig,
    pub decoder: DecoderConfig,
    pub dtype: String,
}

/// Position of a run, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch the next step belongs to.
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            seed,
            best_metric: None,
            best_epoch: None,
        }
    }
}

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(DuetError::Config(format!("unsupported dtype {other:?}"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DuetError::load(path, e))?;
    serde_json::from_str(&text).map_err(|e| DuetError::load(path, e))
}

pub fn read_card(dir: &Path) -> Result<ModelCard> {
    let card: ModelCard = read_json(&dir.join(MODEL_FILE))?;
    if card.format_version != FORMAT_VERSION {
        return Err(DuetError::load(
            dir.join(MODEL_FILE),
            format!("format version {} is not supported", card.format_version),
        ));
    }
    Ok(card)
}

pub fn read_state(dir: &Path) -> Result<TrainState> {
    read_json(&dir.join(STATE_FILE))
}

/// Card describing `model` as it stands now.
pub fn card_for(model: &DuetModel, backbone: &Path, decoder: &DecoderConfig) -> Result<ModelCard> {
    let backbone = std::path::absolute(backbone)?;
    Ok(ModelCard {
        format_version: FORMAT_VERSION,
        backbone,
        backbone_id: model.encoder().config().backbone_id.clone(),
        base_fingerprint: model.encoder().base_fingerprint().to_string(),
        fingerprint: model.fingerprint()?,
        composer: model.composer().config().clone(),
        decoder: decoder.clone(),
        dtype: dtype_name(model.dtype()).to_string(),
    })
}

/// Writes the inference weights and card into an existing directory.
pub fn write_model(dir: &Path, model: &DuetModel, card: &ModelCard) -> Result<()> {
    let mut map: HashMap<String, Tensor> = model.encoder().params().trainable_map();
    map.extend(model.composer().params().to_map());
    candle_core::safetensors::save(&map, dir.join(TRAINABLE_FILE))?;
    std::fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(card)?)?;
    Ok(())
}

pub fn write_decoder(dir: &Path, decoder: &Decoder) -> Result<()> {
    candle_core::safetensors::save(&decoder.params().to_map(), dir.join(DECODER_FILE))?;
    Ok(())
}

/// Loads the model of a checkpoint. `backbone` overrides the directory
/// recorded in the card; either way the backbone must hash to the recorded
/// base fingerprint, and the restored model to the recorded fingerprint.
pub fn load_model(
    dir: &Path,
    backbone: Option<&Path>,
    device: &Device,
) -> Result<(DuetModel, ModelCard)> {
    let card = read_card(dir)?;
    let dtype = parse_dtype(&card.dtype)?;
    let backbone_dir = backbone
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(&card.backbone));
    let encoder = DualEncoder::load(&backbone_dir, dtype, device)?;
    if encoder.base_fingerprint() != card.base_fingerprint {
        return Err(DuetError::Fingerprint {
            index: card.base_fingerprint.clone(),
            checkpoint: encoder.base_fingerprint().to_string(),
        });
    }
    let path = dir.join(TRAINABLE_FILE);
    let weights =
        candle_core::safetensors::load(&path, device).map_err(|e| DuetError::load(&path, e))?;
    encoder.set_trainable(&weights)?;
    let composer = InversionComposer::from_weights(&encoder, card.composer.clone(), weights)?;
    let model = DuetModel::new(encoder, composer);
    let fingerprint = model.fingerprint()?;
    if fingerprint != card.fingerprint {
        return Err(DuetError::load(
            &path,
            format!(
                "weights hash to {fingerprint}, card records {}",
                card.fingerprint
            ),
        ));
    }
    Ok((model, card))
}

pub fn load_decoder(dir: &Path, model: &DuetModel, card: &ModelCard) -> Result<Decoder> {
    let path = dir.join(DECODER_FILE);
    let weights = candle_core::safetensors::load(&path, model.encoder().device())
        .map_err(|e| DuetError::load(&path, e))?;
    let enc = model.encoder();
    Decoder::from_weights(
        enc.config().embed_dim,
        enc.config().image_resolution,
        &card.decoder,
        weights,
        enc.dtype(),
        enc.device(),
    )
}
