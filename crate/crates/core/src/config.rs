//! Experiment configuration. Every field has a default so an empty file is a
//! valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Shared feature width of text and image tokens.
    pub d_t: usize,
    pub n_t_max: usize,
    pub vocab_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub image_blocks: usize,
    pub fusion_blocks: usize,
    pub ffn_mult: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub fusion_kernel: usize,
    /// Width of the additive attention used for pooling.
    pub attn_dim: usize,
    pub classes: usize,
    pub positional_encoding: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_t: 32,
            n_t_max: 16,
            vocab_size: 256,
            channels: 8,
            height: 4,
            width: 4,
            heads: 4,
            image_blocks: 2,
            fusion_blocks: 2,
            ffn_mult: 4,
            cbam_reduction: 4,
            cbam_kernel: 7,
            fusion_kernel: 3,
            attn_dim: 16,
            classes: 3,
            positional_encoding: true,
        }
    }
}

impl ModelDims {
    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_t == 0 || !self.d_t.is_multiple_of(2) {
            return fail(format!("d_t must be even and positive, got {}", self.d_t));
        }
        if self.heads == 0 || !self.d_t.is_multiple_of(self.heads) {
            return fail(format!("d_t={} not divisible by heads={}", self.d_t, self.heads));
        }
        if self.cbam_reduction == 0 || !self.d_t.is_multiple_of(self.cbam_reduction) {
            return fail(format!(
                "cbam_reduction={} must divide d_t={}",
                self.cbam_reduction, self.d_t
            ));
        }
        if self.cbam_kernel.is_multiple_of(2) || self.fusion_kernel.is_multiple_of(2) {
            return fail("convolution kernel widths must be odd".into());
        }
        if self.image_blocks == 0 {
            return fail("image encoder needs at least one transformer block".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        // Token ids 0 and 1 are reserved for the class and mask tokens.
        if self.vocab_size < 3 {
            return fail("vocab_size must be at least 3".into());
        }
        if self.n_t_max == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return fail("sequence and feature-map extents must be positive".into());
        }
        if self.ffn_mult == 0 || self.attn_dim == 0 {
            return fail("ffn_mult and attn_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Gelu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_sc: f64,
    pub lambda_supcon: f64,
    pub temperature: f64,
    pub head_activation: HeadActivation,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sc: 1.0,
            lambda_supcon: 1.0,
            temperature: 0.07,
            head_activation: HeadActivation::Gelu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub gaussian_sigma: f64,
    pub token_drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gaussian_sigma: 0.1,
            token_drop_prob: 0.15,
        }
    }
}

/// Component switches mirroring the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_bilstm: bool,
    pub use_cnn: bool,
    pub use_cbam: bool,
    pub use_supcon: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::ALL_ON
    }
}

impl Ablation {
    pub const ALL_ON: Ablation = Ablation {
        use_bilstm: true,
        use_cnn: true,
        use_cbam: true,
        use_supcon: true,
    };

    /// All 16 flag combinations, all-on first.
    pub fn grid() -> Vec<Ablation> {
        (0..16u8)
            .map(|bits| Ablation {
                use_bilstm: bits & 8 == 0,
                use_cnn: bits & 4 == 0,
                use_cbam: bits & 2 == 0,
                use_supcon: bits & 1 == 0,
            })
            .collect()
    }

    /// Row label in the ablation-table naming style, e.g.
    /// `BiLSTM+MLFC+CBAM+SCSupConLoss`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_bilstm {
            parts.push("BiLSTM");
        }
        parts.push(if self.use_cnn { "MLFC" } else { "MLF" });
        if self.use_cbam {
            parts.push("CBAM");
        }
        parts.push(if self.use_supcon { "SCSupConLoss" } else { "CELoss" });
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelDims,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub ablation: Ablation,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelDims::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            ablation: Ablation::default(),
            seed: 42,
            epochs: 50,
            batch_size: 8,
            dataset: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        Self::from_toml_str(&text)
    }

    /// λ_Supcon after applying the `use_supcon` switch.
    pub fn effective_lambda_supcon(&self) -> f64 {
        if self.ablation.use_supcon {
            self.loss.lambda_supcon
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        let l = &self.loss;
        if !(l.lambda_sc >= 0.0 && l.lambda_supcon >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if l.lambda_sc == 0.0 && self.effective_lambda_supcon() == 0.0 {
            return fail("loss weights cannot both be zero".into());
        }
        if !(l.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", l.temperature));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return fail("optimizer lr/weight_decay must be non-negative and eps positive".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return fail("betas must lie in [0, 1)".into());
        }
        let a = &self.augment;
        if !(a.gaussian_sigma >= 0.0) || !(0.0..1.0).contains(&a.token_drop_prob) {
            return fail("augment sigma must be ≥ 0 and token_drop_prob in [0, 1)".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.optimizer.lr, 1e-3);
    }

    #[test]
    fn partial_override() {
        let cfg = ExperimentConfig::from_toml_str(
            "epochs = 3\n[ablation]\nuse_cbam = false\n[model]\nclasses = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.ablation.use_cbam && cfg.ablation.use_bilstm);
        assert_eq!(cfg.model.classes, 2);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        for bad in [
            "[model]\nd_t = 31",
            "[model]\nheads = 3",
            "[model]\ncbam_reduction = 5",
            "[model]\nimage_blocks = 0",
            "[model]\nclasses = 1",
            "batch_size = 1",
            "[loss]\nlambda_sc = 0.0\nlambda_supcon = 0.0",
            "unknown_field = 1",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn grid_labels() {
        let grid = Ablation::grid();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[0], Ablation::ALL_ON);
        assert_eq!(grid[0].label(), "BiLSTM+MLFC+CBAM+SCSupConLoss");
        let labels: std::collections::HashSet<_> = grid.iter().map(Ablation::label).collect();
        assert_eq!(labels.len(), 16);
    }
}
