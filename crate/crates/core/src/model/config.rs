use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::group_attention::GROUPS;
use crate::nn::se::latent_width;
use crate::nn::CombineMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Sigmoid head per decoder scale, fused by a final head.
    Multiscale,
    /// Final head on the last decoder scale only.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    GroupAttention,
    Basic,
    IdentityPreact,
    #[serde(rename = "resnext")]
    ResNeXt,
    #[serde(rename = "resnext_se")]
    ResNeXtSe,
    ResA,
    ConcatHorizontal,
}

impl BlockKind {
    pub fn is_grouped(self) -> bool {
        matches!(
            self,
            BlockKind::GroupAttention | BlockKind::ConcatHorizontal
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| config_err!("unknown block kind {s:?}"))
    }
}

/// Network shape and variant selectors. Serialized as JSON with unknown keys
/// rejected; omitted keys take the `alpha-tiny` defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scales: usize,
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub first_kernel: usize,
    pub body_kernel: usize,
    pub attention_kernel: usize,
    pub bottleneck_dropout: f64,
    pub decoder_mode: DecoderMode,
    pub block_kind: BlockKind,
    pub combine_mode: CombineMode,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    /// ResNeXt branch count.
    pub cardinality: usize,
    /// Hidden width of the conv-bn-LeakyReLU-conv-sigmoid output heads.
    pub head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::alpha_tiny()
    }
}

impl ModelConfig {
    /// Reference desk-scale configuration: 4 scales, widths 16..128.
    pub fn alpha_tiny() -> Self {
        ModelConfig {
            scales: 4,
            widths: vec![16, 32, 64, 128],
            in_channels: 3,
            first_kernel: 5,
            body_kernel: 3,
            attention_kernel: 1,
            bottleneck_dropout: 0.5,
            decoder_mode: DecoderMode::Multiscale,
            block_kind: BlockKind::GroupAttention,
            combine_mode: CombineMode::PermutationEquivariant1x1,
            leaky_slope: 0.3,
            se_reduction: 8,
            cardinality: 4,
            head_width: 8,
        }
    }

    /// The "Lite" widths preset.
    pub fn alpha_lite() -> Self {
        ModelConfig {
            widths: vec![8, 16, 32, 64],
            ..Self::alpha_tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(config_err!(
                "scales must be at least 2, got {}",
                self.scales
            ));
        }
        if self.widths.len() != self.scales {
            return Err(config_err!(
                "{} widths given for {} scales",
                self.widths.len(),
                self.scales
            ));
        }
        if self.in_channels == 0 || self.head_width == 0 {
            return Err(config_err!("in_channels and head_width must be positive"));
        }
        for (name, k) in [
            ("first_kernel", self.first_kernel),
            ("body_kernel", self.body_kernel),
            ("attention_kernel", self.attention_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return Err(config_err!("{name} must be a positive odd number, got {k}"));
            }
        }
        if !(0.0..1.0).contains(&self.bottleneck_dropout) {
            return Err(config_err!(
                "bottleneck_dropout {} not in [0, 1)",
                self.bottleneck_dropout
            ));
        }
        if !self.leaky_slope.is_finite() {
            return Err(config_err!("leaky_slope must be finite"));
        }
        for &w in &self.widths {
            if w == 0 {
                return Err(config_err!("widths must be positive"));
            }
            if self.block_kind.is_grouped() && w % GROUPS != 0 {
                return Err(config_err!(
                    "width {w} not divisible by {GROUPS} for {:?} blocks",
                    self.block_kind
                ));
            }
            if matches!(self.block_kind, BlockKind::ResNeXt | BlockKind::ResNeXtSe)
                && (self.cardinality == 0 || w % self.cardinality != 0)
            {
                return Err(config_err!(
                    "width {w} not divisible by cardinality {}",
                    self.cardinality
                ));
            }
            latent_width(w, self.se_reduction)?;
        }
        Ok(())
    }

    /// Input H and W must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| config_err!("model config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
