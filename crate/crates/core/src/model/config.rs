use alloc::format;

use crate::error::{AmadError, Result};

/// How attention logits are scaled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScaling {
    /// `1/sqrt(d_head)` for both branches, so the two distributions are
    /// compared at the same temperature.
    #[default]
    PerHead,
    /// `1/sqrt(d_model)` for self-attention and `1/sqrt(d_model * d_model)`
    /// for AutoMask attention.
    Literal,
}

impl AttentionScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionScaling::PerHead => "per_head",
            AttentionScaling::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_head" => Some(AttentionScaling::PerHead),
            "literal" => Some(AttentionScaling::Literal),
            _ => None,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Positions per window.
    pub window_len: usize,
    /// Channels of the input series.
    pub input_dim: usize,
    /// Weight of AutoMask attention in the mixup; `1 - alpha` goes to
    /// self-attention.
    pub mixup_alpha: f64,
    pub rope_base: f64,
    pub seed: u64,
    pub scaling: AttentionScaling,
    /// When off the AutoMask branch is skipped entirely and every block is
    /// a plain self-attention block.
    pub automask: bool,
}

impl ModelConfig {
    /// Published hyperparameters: 3 layers, width 512, 8 heads.
    pub fn published(input_dim: usize, window_len: usize) -> Self {
        ModelConfig {
            n_layers: 3,
            d_model: 512,
            n_heads: 8,
            ..Self::desk(input_dim, window_len)
        }
    }

    /// Small CPU-friendly defaults.
    pub fn desk(input_dim: usize, window_len: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            window_len,
            input_dim,
            mixup_alpha: 0.9,
            rope_base: 10_000.0,
            seed: 7,
            scaling: AttentionScaling::PerHead,
            automask: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(AmadError::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return fail(format!(
                "per-head dimension {} must be even for rotary pairs",
                self.d_head()
            ));
        }
        if self.window_len < 2 {
            return fail(format!("window_len {} must be at least 2", self.window_len));
        }
        if self.input_dim == 0 {
            return fail("input_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mixup_alpha) {
            return fail(format!("mixup_alpha {} outside [0, 1]", self.mixup_alpha));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base {} must be positive", self.rope_base));
        }
        Ok(())
    }
}
