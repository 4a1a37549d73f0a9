use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

/// Shape of a dual encoder backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone_id: String,
    /// Joint embedding width `d`, shared by global image features, patch
    /// features and text outputs.
    pub embed_dim: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// Word-token embedding width, the width of every composed token.
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub image_resolution: usize,
    pub patch_size: usize,
}

impl EncoderConfig {
    /// Small CPU-friendly backbone used for the bundled fixtures.
    pub fn desk_small(vocab_size: usize) -> Self {
        Self {
            backbone_id: "desk-vit-s8".to_string(),
            embed_dim: 128,
            vision_width: 128,
            vision_layers: 3,
            vision_heads: 4,
            text_width: 128,
            text_layers: 3,
            text_heads: 4,
            vocab_size,
            context_length: 32,
            image_resolution: 32,
            patch_size: 8,
        }
    }

    /// The ViT-L/14 CLIP layout, loadable from converted checkpoints.
    pub fn vit_l14() -> Self {
        Self {
            backbone_id: "clip-vit-l14".to_string(),
            embed_dim: 768,
            vision_width: 1024,
            vision_layers: 24,
            vision_heads: 16,
            text_width: 768,
            text_layers: 12,
            text_heads: 12,
            vocab_size: 49408,
            context_length: 77,
            image_resolution: 224,
            patch_size: 14,
        }
    }

    /// Number of image patches `T`.
    pub fn patch_count(&self) -> usize {
        let side = self.image_resolution / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DuetError::Config(msg));
        if self.embed_dim == 0 || self.vision_width == 0 || self.text_width == 0 {
            return fail("widths must be positive".into());
        }
        if self.context_length < 5 {
            return fail(format!(
                "context_length {} leaves no room for prompt, pseudo-word and text",
                self.context_length
            ));
        }
        if self.patch_size == 0 || !self.image_resolution.is_multiple_of(self.patch_size) {
            return fail(format!(
                "resolution {} is not a multiple of patch size {}",
                self.image_resolution, self.patch_size
            ));
        }
        if !self.vision_width.is_multiple_of(self.vision_heads.max(1)) || self.vision_heads == 0 {
            return fail("vision width must divide into heads".into());
        }
        if !self.text_width.is_multiple_of(self.text_heads.max(1)) || self.text_heads == 0 {
            return fail("text width must divide into heads".into());
        }
        if self.vocab_size < 3 {
            return fail("vocabulary too small".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        EncoderConfig::desk_small(600).validate().unwrap();
        let l14 = EncoderConfig::vit_l14();
        l14.validate().unwrap();
        assert_eq!(l14.embed_dim, 768);
        assert_eq!(l14.patch_count(), 256);
        assert_eq!(EncoderConfig::desk_small(600).patch_count(), 16);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = EncoderConfig::desk_small(600);
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk_small(600);
        c.context_length = 4;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk_small(600);
        c.embed_dim = 0;
        assert!(c.validate().is_err());
    }
}
