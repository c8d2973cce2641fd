//! Architecture configuration shared by the tokenizer, encoder and cross-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_len;

/// Denominator used to scale attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d / h)`, the per-head width.
    #[default]
    PerHead,
    /// `sqrt(d)` of the full embedding.
    FullWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input resolution (H = W).
    pub image_size: usize,
    /// Token width d.
    pub dim: usize,
    /// Kernel sizes of the multi-level sketch stack; padding is `k / 2`.
    pub sketch_kernels: Vec<usize>,
    pub conv_stride: usize,
    /// Kernel and stride of the single image patch convolution.
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based blocks after which tokens are filtered. `None` picks
    /// `{ceil(L/3), ceil(2L/3)}`.
    pub filter_layers: Option<Vec<usize>>,
    pub keep_ratio: f64,
    pub attention_scale: AttentionScale,
    /// Share encoder weights between the sketch and image branches.
    pub tied_encoders: bool,
    pub cross_heads: usize,
    pub ln_eps: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 224×224 inputs, 196 tokens of width 768, 12 blocks, 12 heads.
    pub fn base() -> Self {
        ModelConfig {
            image_size: 224,
            dim: 768,
            sketch_kernels: vec![7, 3, 3, 3],
            conv_stride: 2,
            patch_size: 16,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            filter_layers: None,
            keep_ratio: 0.7,
            attention_scale: AttentionScale::PerHead,
            tied_encoders: true,
            cross_heads: 12,
            ln_eps: 1e-5,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
            init_std: 0.02,
        }
    }

    /// Desk-scale model: 64×64 inputs, 16 tokens of width 32.
    pub fn toy() -> Self {
        ModelConfig { image_size: 64, dim: 32, layers: 2, heads: 4, cross_heads: 4, ..Self::base() }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn filter_layers(&self) -> Vec<usize> {
        match &self.filter_layers {
            Some(v) => v.clone(),
            None => {
                let l = self.layers;
                let mut v: Vec<usize> = [l.div_ceil(3), (2 * l).div_ceil(3)].into_iter().filter(|&x| x >= 1).collect();
                v.dedup();
                v
            }
        }
    }

    /// Channel widths of the sketch stack, doubling up to `dim` (at least 1).
    pub fn sketch_channels(&self) -> Vec<usize> {
        let n = self.sketch_kernels.len();
        (0..n).map(|i| (self.dim >> (n - 1 - i)).max(1)).collect()
    }

    /// Side length of the sketch token grid.
    pub fn sketch_grid(&self) -> Option<usize> {
        self.sketch_kernels.iter().try_fold(self.image_size, |h, &k| conv_out_len(h, k, self.conv_stride, k / 2))
    }

    /// Number of visual tokens n (excluding the retrieval token).
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.cross_heads == 0 || !self.dim.is_multiple_of(self.cross_heads) {
            return fail(format!("dim {} not divisible by cross_heads {}", self.dim, self.cross_heads));
        }
        if self.sketch_kernels.is_empty() || self.conv_stride == 0 {
            return fail("sketch stack needs at least one layer and stride ≥ 1".into());
        }
        let n = self.sketch_kernels.len();
        if !self.dim.is_multiple_of(1 << (n - 1)) {
            return fail(format!("dim {} must be divisible by 2^{}", self.dim, n - 1));
        }
        let reduction = self.conv_stride.pow(n as u32);
        if !self.image_size.is_multiple_of(reduction) {
            return fail(format!("image size {} not divisible by sketch-stack reduction {reduction}", self.image_size));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        match self.sketch_grid() {
            Some(g) if g * g == self.tokens() => {}
            other => {
                return fail(format!(
                    "sketch grid {other:?} does not match image patch grid {}",
                    self.image_size / self.patch_size
                ))
            }
        }
        if let Some(&bad) = self.filter_layers().iter().find(|&&l| l == 0 || l > self.layers) {
            return fail(format!("filter layer {bad} outside 1..={}", self.layers));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return fail(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if self.mlp_ratio == 0 || self.norm_std.iter().any(|&s| s <= 0.0) {
            return fail("mlp_ratio and norm_std must be positive".into());
        }
        Ok(())
    }
}
