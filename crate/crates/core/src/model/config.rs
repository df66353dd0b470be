use crate::error::{config_err, Result};

/// Architectural hyperparameters of the dual-stream network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub embed_dim: usize,
    pub num_lmhsa_blocks: usize,
    pub num_heads: usize,
    /// Spatial downsampling ratio applied to keys and values.
    pub kv_reduction: usize,
    pub mlp_conv_hidden_ratio: usize,
    pub cnn_channels: Vec<usize>,
    pub ffn_expansion: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 192,
            in_channels: 3,
            stem_channels: 32,
            embed_dim: 64,
            num_lmhsa_blocks: 2,
            num_heads: 4,
            kv_reduction: 2,
            mlp_conv_hidden_ratio: 4,
            cnn_channels: vec![64, 64, 64, 64],
            ffn_expansion: 4,
            num_classes: 5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 64×64 input, 16-wide embedding, one attention block. Small enough
    /// for exhaustive finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            input_size: 64,
            embed_dim: 16,
            num_lmhsa_blocks: 1,
            cnn_channels: vec![16, 16, 16, 16],
            ..Self::default()
        }
    }

    /// Side length of the feature grid both streams operate on.
    pub fn grid_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn cnn_out_channels(&self) -> usize {
        self.cnn_channels.last().copied().unwrap_or(self.embed_dim)
    }

    pub fn fused_dim(&self) -> usize {
        self.embed_dim + self.cnn_out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("kv_reduction", self.kv_reduction),
            ("mlp_conv_hidden_ratio", self.mlp_conv_hidden_ratio),
            ("ffn_expansion", self.ffn_expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be positive"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return config_err(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.input_size % 4 != 0 {
            return config_err(format!("input_size {} is not divisible by 4", self.input_size));
        }
        if self.grid_size() % self.kv_reduction != 0 {
            return config_err(format!(
                "feature grid {} is not divisible by kv_reduction {}",
                self.grid_size(),
                self.kv_reduction
            ));
        }
        if self.num_classes < 2 {
            return config_err("num_classes must be at least 2");
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return config_err("cnn_channels must list positive widths");
        }
        Ok(())
    }
}
