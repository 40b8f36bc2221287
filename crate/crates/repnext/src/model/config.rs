//! Model configuration: the JSON-facing schema, validation, and the shipped
//! default variants.

use serde::{Deserialize, Serialize};

use crate::blocks::BranchToggles;
use crate::error::{Error, Result};

/// How the three inter-stage downsample layers are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMode {
    /// Copy convolution block with normalized residual and channel mixer.
    CopyConv,
    /// Ablation: one dense 3x3 stride-2 conv plus norm.
    Plain3x3,
}

impl Default for DownsampleMode {
    fn default() -> Self {
        DownsampleMode::CopyConv
    }
}

fn default_k_s() -> usize {
    3
}
fn default_k_m() -> usize {
    7
}
fn default_k_l() -> usize {
    11
}
fn default_mlp_ratio() -> f64 {
    2.0
}
fn default_bias() -> bool {
    true
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_classes() -> usize {
    1000
}

/// Full model configuration. The JSON form mirrors this struct field for
/// field; unknown keys are rejected so a typo cannot silently fall back to
/// a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    /// Channel width entering each of the four stages; every width must be
    /// divisible by 4 (the chunk split).
    pub stage_widths: [usize; 4],
    /// MetaNeXt blocks per stage.
    pub stage_depths: [usize; 4],
    #[serde(default = "default_k_s")]
    pub k_s: usize,
    #[serde(default = "default_k_m")]
    pub k_m: usize,
    #[serde(default = "default_k_l")]
    pub k_l: usize,
    /// Channel-mixer expansion; hidden width = round(C * mlp_ratio).
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub branches: BranchToggles,
    #[serde(default)]
    pub downsample: DownsampleMode,
    /// Whether convs carry biases.
    #[serde(default = "default_bias")]
    pub bias: bool,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Classifier output width. Not part of the published architecture
    /// tables; needed so `run` can produce logits.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl ModelConfig {
    /// Validate every invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.variant.is_empty() {
            return Err(Error::invalid_config("variant", "must be non-empty"));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 || w % 4 != 0 {
                return Err(Error::invalid_config(
                    "stage_widths",
                    format!("stage {i} width {w} must be a positive multiple of 4"),
                ));
            }
        }
        for (i, &d) in self.stage_depths.iter().enumerate() {
            if d == 0 {
                return Err(Error::invalid_config(
                    "stage_depths",
                    format!("stage {i} depth must be >= 1"),
                ));
            }
        }
        if self.k_s < 3 || self.k_s % 2 == 0 {
            return Err(Error::invalid_config("k_s", "must be odd and >= 3"));
        }
        // The medium set carries (k_m-4) and (k_m-2) cross kernels, so 5 is
        // the floor.
        if self.k_m < 5 || self.k_m % 2 == 0 {
            return Err(Error::invalid_config("k_m", "must be odd and >= 5"));
        }
        if self.k_l < 3 || self.k_l % 2 == 0 {
            return Err(Error::invalid_config("k_l", "must be odd and >= 3"));
        }
        if self.k_s > self.k_m {
            return Err(Error::invalid_config("k_s", "must be <= k_m"));
        }
        if !self.mlp_ratio.is_finite() || self.mlp_ratio <= 0.0 {
            return Err(Error::invalid_config("mlp_ratio", "must be finite and > 0"));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if self.hidden_width(w) == 0 {
                return Err(Error::invalid_config(
                    "mlp_ratio",
                    format!("hidden width rounds to 0 at stage {i}"),
                ));
            }
        }
        if !self.bn_eps.is_finite() || self.bn_eps < 0.0 {
            return Err(Error::invalid_config("bn_eps", "must be finite and >= 0"));
        }
        if self.classes == 0 {
            return Err(Error::invalid_config("classes", "must be >= 1"));
        }
        Ok(())
    }

    /// Channel-mixer hidden width for a stage of width `c`.
    pub fn hidden_width(&self, c: usize) -> usize {
        (c as f64 * self.mlp_ratio).round() as usize
    }

    /// Shipped default variant by name (m1..m5). Stage widths and depths
    /// are documented approximations: the published tables give only the
    /// totals each variant should land near, which `reference_totals`
    /// reports.
    pub fn preset(name: &str) -> Option<ModelConfig> {
        let (widths, depths) = match name {
            "m1" => ([48, 96, 192, 384], [2, 2, 14, 2]),
            "m2" => ([56, 112, 224, 448], [2, 2, 14, 2]),
            "m3" => ([64, 128, 256, 512], [2, 2, 12, 2]),
            "m4" => ([64, 128, 256, 512], [4, 4, 24, 4]),
            "m5" => ([80, 160, 320, 640], [4, 4, 26, 4]),
            _ => return None,
        };
        Some(ModelConfig {
            variant: name.to_string(),
            stage_widths: widths,
            stage_depths: depths,
            k_s: default_k_s(),
            k_m: default_k_m(),
            k_l: default_k_l(),
            mlp_ratio: default_mlp_ratio(),
            branches: BranchToggles::default(),
            downsample: DownsampleMode::default(),
            bias: default_bias(),
            bn_eps: default_bn_eps(),
            classes: default_classes(),
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["m1", "m2", "m3", "m4", "m5"]
    }

    /// Published reference totals for a variant, as (params in millions,
    /// GMACs) at 224x224. The shipped configs approximate these; exactness
    /// is asserted only for per-block closed forms.
    pub fn reference_totals(variant: &str) -> Option<(f64, f64)> {
        Some(match variant {
            "m1" => (4.8, 0.8),
            "m2" => (6.5, 1.1),
            "m3" => (7.8, 1.3),
            "m4" => (13.3, 2.3),
            "m5" => (21.7, 4.5),
            _ => return None,
        })
    }

    pub fn from_json_str(text: &str) -> Result<ModelConfig> {
        let config: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::invalid_config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn load_file(path: &std::path::Path) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path)?;
        ModelConfig::from_json_str(&text)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}
