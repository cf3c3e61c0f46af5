//! Divided space-time video transformer with a class token and a
//! self-distillation projection head.
//!
//! A clip `[K, 3, H, W]` becomes `1 + K * N_s` tokens: the class token at
//! index 0, then patch `(t, s)` at `1 + t * N_s + s`. Several clips of
//! different shapes can share one token matrix; attention plans keep them
//! apart, and every linear layer then runs as a single large product.

mod forward;
mod params;
mod pos;

use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

pub use forward::{
    attention_maps, forward_clips, forward_features, patchify, patchify_embed, ClipLayout, ForwardOut, ModelVars,
    TokenGrid,
};
pub use params::{is_decayed, ModelParams};
pub use pos::{positional_encoding, sinusoid, spatial_encoding, temporal_encoding};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("clip of {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleSize { height: usize, width: usize, patch: usize },
    #[error("expected a [K, 3, H, W] clip, got {0:?}")]
    BadClip(Vec<usize>),
    #[error("layer {layer} out of range for depth {depth}")]
    InvalidLayer { layer: usize, depth: usize },
    #[error("parameter sets differ: {0}")]
    NameMismatch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("no clips to forward")]
    NoClips,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Advisory; larger grids are accepted because encodings are normalized.
    pub max_spatial_tokens: usize,
    /// Advisory, see `max_spatial_tokens`.
    pub max_temporal_tokens: usize,
    pub proj_hidden: usize,
    pub proj_bottleneck: usize,
    pub proj_out: usize,
    /// Pixels enter the patch projection as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    /// Multiplier applied to normalized coordinates before the sinusoids.
    pub pos_scale: f64,
    pub ln_eps: f64,
    /// Std of the class token and its learned encoding.
    pub init_std: f64,
    pub zero_init_temporal_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_spatial_tokens: 196,
            max_temporal_tokens: 16,
            proj_hidden: 256,
            proj_bottleneck: 64,
            proj_out: 256,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            pos_scale: 16.0,
            ln_eps: 1e-6,
            init_std: 0.02,
            zero_init_temporal_proj: true,
        }
    }
}

impl ModelConfig {
    /// ViT-Base sized configuration with 16-pixel patches.
    pub fn base() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            proj_hidden: 2048,
            proj_bottleneck: 256,
            proj_out: 65536,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if ![8, 16, 32].contains(&self.patch_size) {
            return fail(format!("patch_size {} not in {{8, 16, 32}}", self.patch_size));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return fail(format!("embed_dim {} must be a positive multiple of 4", self.embed_dim));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return fail("depth and mlp_ratio must be positive".into());
        }
        if self.proj_hidden == 0 || self.proj_bottleneck == 0 || self.proj_out == 0 {
            return fail("projection head sizes must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.init_std > 0.0 && self.pos_scale > 0.0 && self.pixel_std > 0.0) {
            return fail("ln_eps, init_std, pos_scale and pixel_std must be positive".into());
        }
        if !self.pixel_mean.is_finite() {
            return fail("pixel_mean must be finite".into());
        }
        Ok(())
    }

    /// Spatial tokens for an `h x w` frame.
    pub fn spatial_tokens(&self, h: usize, w: usize) -> Result<usize, ModelError> {
        let p = self.patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(ModelError::IndivisibleSize {
                height: h,
                width: w,
                patch: p,
            });
        }
        Ok((h / p) * (w / p))
    }

    pub fn token_count(&self, frames: usize, h: usize, w: usize) -> Result<usize, ModelError> {
        Ok(1 + frames * self.spatial_tokens(h, w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let paper = ModelConfig { patch_size: 16, ..ModelConfig::default() };
        assert_eq!(paper.spatial_tokens(224, 224).unwrap(), 196);
        assert_eq!(paper.spatial_tokens(96, 96).unwrap(), 36);
        assert_eq!(paper.token_count(5, 96, 96).unwrap(), 181);
        assert_eq!(ModelConfig::default().spatial_tokens(64, 64).unwrap(), 64);
        assert!(matches!(paper.spatial_tokens(100, 96), Err(ModelError::IndivisibleSize { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::base().validate().is_ok());
        assert!(ModelConfig { heads: 5, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { patch_size: 7, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { embed_dim: 6, heads: 2, ..ModelConfig::default() }.validate().is_err());
    }
}
