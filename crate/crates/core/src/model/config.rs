use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensional hyperparameters of the early-exit encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of transformer blocks (L).
    pub layers: usize,
    /// Hidden width (d).
    pub hidden: usize,
    /// Attention heads in the encoder blocks.
    pub heads: usize,
    /// Feedforward inner width.
    pub ffn: usize,
    /// Bottleneck width of every classifier head.
    pub cls_hidden: usize,
    /// Number of output classes (N).
    pub classes: usize,
    /// Vocabulary size (V).
    pub vocab_size: usize,
    /// Longest accepted sequence, including the classification and separator tokens.
    pub max_len: usize,
    /// Dropout probability in training mode.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(2, 64)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, width 32, 2 heads, head width 16.
    pub fn desk(classes: usize, vocab_size: usize) -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 2,
            ffn: 128,
            cls_hidden: 16,
            classes,
            vocab_size,
            max_len: 32,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// The 12-layer, 768-wide configuration used for cost accounting.
    pub fn bert_base(classes: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            cls_hidden: 128,
            classes,
            vocab_size: 21128,
            max_len: 128,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.layers < 2 {
            return fail(format!("layers must be at least 2, got {}", self.layers));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 || self.cls_hidden == 0 {
            return fail("ffn and cls_hidden must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover the four reserved tokens".into());
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn students(&self) -> usize {
        self.layers - 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
