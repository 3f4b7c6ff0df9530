use serde::{Deserialize, Serialize};

use super::ModelError;

/// Direction of the per-layer cross-stream update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntegrationMode {
    /// Spatial context refines the temporal stream.
    #[serde(rename = "ST2T")]
    St2t,
    /// Temporal context refines the spatial stream.
    #[serde(rename = "ST2S")]
    St2s,
    /// Both updates, computed from the same pre-update pair.
    #[serde(rename = "BIDIR")]
    Bidir,
    /// No cross-stream traffic before fusion.
    #[serde(rename = "NONE")]
    None,
}

impl IntegrationMode {
    pub fn updates_temporal(self) -> bool {
        matches!(self, Self::St2t | Self::Bidir)
    }

    pub fn updates_spatial(self) -> bool {
        matches!(self, Self::St2s | Self::Bidir)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Adaptive,
    MeanConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    /// Feature maps inside the spatial tokenizer.
    pub spatial_maps: usize,
    pub n_heads: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub dropout: f64,
    pub ffn_expansion: usize,
    /// Depthwise kernel length of the temporal tokenizer (odd).
    pub temporal_kernel: usize,
    /// Kernel length of the shared per-channel conv in the spatial tokenizer (odd).
    pub spatial_kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub classifier_hidden: usize,
    pub integration_mode: IntegrationMode,
    pub use_positional_embedding: bool,
    pub use_cosine_gate: bool,
    pub use_electrode_pos_embedding: bool,
    /// When false, each interaction is a linear map of the concatenated streams.
    pub use_tsia: bool,
    /// One electrode embedding shared by all heads instead of one per head.
    pub shared_electrode_pos: bool,
    pub fusion_mode: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 22,
            n_samples: 1000,
            n_classes: 2,
            embed_dim: 40,
            spatial_maps: 16,
            n_heads: 4,
            temporal_depth: 3,
            spatial_depth: 3,
            dropout: 0.25,
            ffn_expansion: 4,
            temporal_kernel: 25,
            spatial_kernel: 1,
            pool_window: 50,
            pool_stride: 50,
            classifier_hidden: 32,
            integration_mode: IntegrationMode::St2t,
            use_positional_embedding: true,
            use_cosine_gate: true,
            use_electrode_pos_embedding: true,
            use_tsia: true,
            shared_electrode_pos: false,
            fusion_mode: FusionMode::Adaptive,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_channels: 3,
            n_samples: 64,
            n_classes: 2,
            embed_dim: 8,
            spatial_maps: 2,
            n_heads: 2,
            temporal_depth: 1,
            spatial_depth: 1,
            dropout: 0.0,
            ffn_expansion: 2,
            temporal_kernel: 5,
            spatial_kernel: 3,
            pool_window: 16,
            pool_stride: 16,
            classifier_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |detail: String| Err(ModelError::InvalidConfig(detail));
        let positive = [
            ("n_channels", self.n_channels),
            ("n_samples", self.n_samples),
            ("embed_dim", self.embed_dim),
            ("spatial_maps", self.spatial_maps),
            ("n_heads", self.n_heads),
            ("temporal_depth", self.temporal_depth),
            ("ffn_expansion", self.ffn_expansion),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} is not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2".into());
        }
        if self.spatial_depth > self.temporal_depth {
            return bad(format!(
                "spatial_depth {} exceeds temporal_depth {}",
                self.spatial_depth, self.temporal_depth
            ));
        }
        for (name, k) in [("temporal_kernel", self.temporal_kernel), ("spatial_kernel", self.spatial_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.n_samples < self.pool_window {
            return bad(format!("n_samples {} is shorter than pool_window {}", self.n_samples, self.pool_window));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Number of temporal tokens.
    pub fn n_patches(&self) -> usize {
        (self.n_samples - self.pool_window) / self.pool_stride + 1
    }

    /// Pooled length inside the spatial tokenizer.
    pub fn spatial_pooled(&self) -> usize {
        self.n_patches()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.embed_dim * self.ffn_expansion
    }

    pub fn fusion_hidden(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_give_twenty_patches() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_patches(), 20);
        assert_eq!(cfg.head_dim(), 10);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_invalid() {
        let mut c = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { spatial_depth: 4, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { n_samples: 40, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { temporal_kernel: 24, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_names() {
        let s = serde_json::to_string(&IntegrationMode::Bidir).unwrap();
        assert_eq!(s, "\"BIDIR\"");
        let f: FusionMode = serde_json::from_str("\"mean-concat\"").unwrap();
        assert_eq!(f, FusionMode::MeanConcat);
        let err = serde_json::from_str::<ModelConfig>(r#"{"embed_dims": 4}"#);
        assert!(err.is_err());
    }
}
