//! Tiny surrogate encoders for gradient checks and fast tests.

use std::sync::OnceLock;

use candle_core::{DType, Device};

use crate::encoder::pretrain::surrogate_tokenizer;
use crate::encoder::{DualEncoder, EncoderConfig};
use crate::tokenizer::BpeTokenizer;

/// Tokenizer whose merges cover the bundled phrase lists and fixture words.
pub fn corpus_tokenizer() -> BpeTokenizer {
    static TOK: OnceLock<BpeTokenizer> = OnceLock::new();
    TOK.get_or_init(surrogate_tokenizer).clone()
}

/// A `d = 16` backbone with one layer per tower and 8x8 inputs.
pub fn tiny_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        backbone_id: "tiny-surrogate".to_string(),
        embed_dim: 16,
        vision_width: 16,
        vision_layers: 1,
        vision_heads: 2,
        text_width: 16,
        text_layers: 1,
        text_heads: 2,
        vocab_size,
        context_length: 24,
        image_resolution: 8,
        patch_size: 4,
    }
}

pub fn tiny_encoder(dtype: DType) -> DualEncoder {
    let tok = corpus_tokenizer();
    let cfg = tiny_config(tok.vocab_size());
    DualEncoder::random(cfg, tok, 5, dtype, &Device::Cpu).expect("tiny encoder")
}

/// Writes the shapes fixture and a saved tiny backbone under `dir` and
/// returns a short training configuration over them.
pub fn tiny_run(dir: &std::path::Path) -> crate::trainer::TrainConfig {
    let shapes = dir.join("shapes");
    crate::data::fixture::write_shapes_fixture(&shapes).expect("fixture");
    let backbone = dir.join("backbone");
    tiny_encoder(DType::F32)
        .save(&backbone)
        .expect("save backbone");
    let text = format!(
        "backbone = {:?}\nmanifest = {:?}\noutput = {:?}\nepochs = 2\nbatch_size = 8\nseed = 3\n",
        backbone,
        shapes.join("manifest.json"),
        dir.join("run")
    );
    crate::trainer::TrainConfig::from_toml(&text, &[]).expect("config")
}
