//! Sequence-mixing blocks: SummaryMixing, Windowed SummaryMixing, and a
//! multi-head self-attention baseline.
//!
//! SummaryMixing replaces pairwise attention with a per-utterance mean of
//! transformed frames, concatenated to a per-frame transform and projected
//! back out. The windowed variant adds a sliding-window mean over the
//! 2k+1 frames around each position as a third input, restoring local
//! context while staying O(T). The attention block is the deliberate
//! O(T^2) reference the efficiency claims are measured against.

mod analysis;
mod attention;
mod summary;

pub use analysis::{block_activation_bytes, block_macs};
pub use attention::AttentionBlock;
pub use summary::SummaryBlock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How edge windows of the sliding-window mean are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMode {
    /// Divide by the count of in-range valid frames (a true mean, exact at
    /// the sequence edges).
    ValidCount,
    /// Divide by the full 2k+1 with out-of-range frames counting as zeros.
    ZeroPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingVariant {
    /// Global summary only.
    Sm,
    /// Global plus windowed neighborhood summary.
    Wsm,
    /// Multi-head scaled dot-product self-attention.
    Attention,
}

impl MixingVariant {
    pub fn label(&self) -> &'static str {
        match self {
            MixingVariant::Sm => "SM",
            MixingVariant::Wsm => "WSM",
            MixingVariant::Attention => "Attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm" => Ok(MixingVariant::Sm),
            "wsm" => Ok(MixingVariant::Wsm),
            "att" | "attention" => Ok(MixingVariant::Attention),
            other => Err(Error::Config(format!("unknown mixing variant: {other}"))),
        }
    }
}

/// Hyperparameters of one mixing block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingConfig {
    pub variant: MixingVariant,
    /// Embedding width d.
    pub d_model: usize,
    /// Width of the feed-forward outputs feeding the summaries.
    pub d_summary: usize,
    /// Window half-size k; the window spans 2k+1 frames.
    pub window_k: usize,
    pub boundary_mode: BoundaryMode,
    /// Head count for the attention baseline.
    pub n_heads: usize,
    /// When true the global summary gets its own frame transform instead of
    /// sharing the windowed one.
    pub separate_global_transform: bool,
    /// Dropout rate applied inside the output transform at train time.
    pub dropout: f64,
}

impl MixingConfig {
    pub fn new(variant: MixingVariant, d_model: usize) -> Result<Self> {
        let cfg = MixingConfig {
            variant,
            d_model,
            d_summary: d_model,
            window_k: 5,
            boundary_mode: BoundaryMode::ValidCount,
            n_heads: 4,
            separate_global_transform: false,
            dropout: 0.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, k: usize) -> Result<Self> {
        self.window_k = k;
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary(mut self, mode: BoundaryMode) -> Self {
        self.boundary_mode = mode;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        self.n_heads = heads;
        self.validate()?;
        Ok(self)
    }

    pub fn with_summary_width(mut self, d_summary: usize) -> Result<Self> {
        self.d_summary = d_summary;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 1 {
            return Err(Error::Config("d_model must be >= 1".into()));
        }
        if self.d_summary < 1 {
            return Err(Error::Config("d_summary must be >= 1".into()));
        }
        if self.window_k < 1 {
            return Err(Error::Config("window_k must be >= 1".into()));
        }
        if self.variant == MixingVariant::Attention {
            if self.n_heads == 0 {
                return Err(Error::Config("attention needs at least one head".into()));
            }
            if !self.d_model.is_multiple_of(self.n_heads) {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {} heads",
                    self.d_model, self.n_heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Full window length, always 2k+1.
    pub fn window_len(&self) -> usize {
        2 * self.window_k + 1
    }
}
