use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Sizes of the stand-in language model, its vision stub and the pruning
/// classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder_layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub patch_dim: usize,
    pub classifier_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_intermediate: usize,
    pub classifier_heads: usize,
    pub classifier_kv_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder_layers: 4,
            heads: 4,
            kv_heads: 2,
            hidden: 64,
            intermediate: 128,
            vocab: 16,
            // A 4096-token prompt plus room for generated tokens.
            max_seq: 4160,
            patch_dim: 32,
            classifier_layers: 8,
            classifier_hidden: 128,
            classifier_intermediate: 512,
            classifier_heads: 8,
            classifier_kv_heads: 2,
        }
    }
}

/// Named configurations, selectable from run configs with `preset = "<name>"`.
pub const PRESETS: &[&str] = &["desk", "desk-small", "paper-classifier", "tiny"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig::default();
        let cfg = match name {
            "desk" => base,
            // Scaled-down classifier depth.
            "desk-small" => ModelConfig {
                classifier_layers: 2,
                ..base
            },
            // Full-width classifier encoder: 768 hidden,
            // 3072 intermediate, 16 heads sharing 4 key/value heads.
            "paper-classifier" => ModelConfig {
                classifier_layers: 8,
                classifier_hidden: 768,
                classifier_intermediate: 3072,
                classifier_heads: 16,
                classifier_kv_heads: 4,
                ..base
            },
            // Two-layer d=16 model used for gradient checks.
            "tiny" => ModelConfig {
                decoder_layers: 2,
                heads: 2,
                kv_heads: 1,
                hidden: 16,
                intermediate: 32,
                vocab: 16,
                max_seq: 64,
                patch_dim: 12,
                classifier_layers: 2,
                classifier_hidden: 16,
                classifier_intermediate: 32,
                classifier_heads: 4,
                classifier_kv_heads: 2,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("patch_dim", self.patch_dim),
            ("classifier_layers", self.classifier_layers),
            ("classifier_hidden", self.classifier_hidden),
            ("classifier_intermediate", self.classifier_intermediate),
            ("classifier_heads", self.classifier_heads),
            ("classifier_kv_heads", self.classifier_kv_heads),
        ];
        for (name, v) in counts {
            ensure!(
                v >= 1,
                Error::InvalidArgument(format!("model.{name} must be >= 1"))
            );
        }
        let divides = |what: &str, a: usize, b: usize| {
            ensure!(
                a.is_multiple_of(b),
                Error::InvalidArgument(format!("model: {what} ({a} not divisible by {b})"))
            );
            Ok(())
        };
        divides("heads mod kv_heads", self.heads, self.kv_heads)?;
        divides("hidden mod heads", self.hidden, self.heads)?;
        divides(
            "classifier_heads mod classifier_kv_heads",
            self.classifier_heads,
            self.classifier_kv_heads,
        )?;
        divides(
            "classifier_hidden mod classifier_heads",
            self.classifier_hidden,
            self.classifier_heads,
        )?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn classifier_head_dim(&self) -> usize {
        self.classifier_hidden / self.classifier_heads
    }
}
