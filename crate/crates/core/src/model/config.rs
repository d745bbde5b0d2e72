use serde::{Deserialize, Serialize};

use crate::attention::{Aggregation, ScaleCombine};
use crate::error::{Error, Result};

/// Reduction ratios per stage, first to last.
pub const LAMBDA_SCHEDULE: [&[f64]; 4] = [&[64.0, 16.0], &[16.0, 4.0], &[4.0, 1.0], &[1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PatchEmbedConfig {
    /// 7×7 / stride 4 / pad 3 for the first stage, 3×3 / stride 2 / pad 1 after.
    pub fn for_stage(stage: usize, in_channels: usize, out_channels: usize) -> Self {
        let (kernel, stride, padding) = if stage == 0 { (7, 4, 3) } else { (3, 2, 1) };
        PatchEmbedConfig {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Output side length for an input side, if the window fits.
    pub fn out_side(&self, side: usize) -> Option<usize> {
        (side + 2 * self.padding >= self.kernel).then(|| (side + 2 * self.padding - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub lambdas: Vec<f64>,
    pub patch_embed: PatchEmbedConfig,
}

fn default_ffn_ratio() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

fn default_in_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub input_resolution: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    /// Density neighbors; `None` means `min(5, N − 1)` per layer.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub combine: ScaleCombine,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn pyramid(variant: &str, layers: [usize; 4], channels: [usize; 4], heads: [usize; 4], num_classes: usize, res: usize) -> ModelConfig {
    let mut stages = Vec::with_capacity(4);
    let mut in_ch = 3;
    for i in 0..4 {
        stages.push(StageConfig {
            layers: layers[i],
            channels: channels[i],
            heads: heads[i],
            lambdas: LAMBDA_SCHEDULE[i].to_vec(),
            patch_embed: PatchEmbedConfig::for_stage(i, in_ch, channels[i]),
        });
        in_ch = channels[i];
    }
    ModelConfig {
        variant: variant.to_string(),
        stages,
        num_classes,
        input_resolution: res,
        in_channels: 3,
        ffn_ratio: 4,
        k: None,
        combine: ScaleCombine::Concat,
        aggregation: Aggregation::Cluster,
        init_std: 0.02,
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        pyramid("T", [1, 2, 6, 1], [64, 128, 256, 512], [1, 2, 4, 8], 1000, 224)
    }

    pub fn small() -> Self {
        pyramid("S", [3, 5, 13, 2], [64, 128, 256, 512], [1, 2, 4, 8], 1000, 224)
    }

    pub fn base() -> Self {
        pyramid("B", [3, 5, 18, 3], [64, 128, 320, 512], [1, 2, 5, 8], 1000, 224)
    }

    /// Desk-scale variant for tests and toy training: 32×32 inputs, 10 classes.
    pub fn micro() -> Self {
        pyramid("micro", [1, 1, 1, 1], [16, 32, 64, 128], [1, 1, 2, 4], 10, 32)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t" | "tiny" | "clustr-t" => Some(Self::tiny()),
            "s" | "small" | "clustr-s" => Some(Self::small()),
            "b" | "base" | "clustr-b" => Some(Self::base()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn with_resolution(mut self, res: usize) -> Self {
        self.input_resolution = res;
        self
    }

    /// Replaces every stage's reduction ratios.
    pub fn with_lambdas(mut self, lambdas: &[Vec<f64>]) -> Self {
        for (s, l) in self.stages.iter_mut().zip(lambdas) {
            s.lambdas = l.clone();
        }
        self
    }

    /// Token grid side after each stage for the configured resolution.
    pub fn stage_grids(&self) -> Result<Vec<usize>> {
        let mut side = self.input_resolution;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            side = s.patch_embed.out_side(side).ok_or_else(|| {
                Error::Geometry(format!(
                    "stage {} window {} does not fit a {side}×{side} input",
                    i + 1,
                    s.patch_embed.kernel
                ))
            })?;
            out.push(side);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Param("a model needs at least one stage".into()));
        }
        if self.num_classes == 0 || self.ffn_ratio == 0 {
            return Err(Error::Param("num_classes and ffn_ratio must be positive".into()));
        }
        let mut in_ch = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            let pe = &s.patch_embed;
            if pe.in_channels != in_ch || pe.out_channels != s.channels {
                return Err(Error::Param(format!(
                    "stage {} patch embedding maps {}→{} but the pyramid needs {in_ch}→{}",
                    i + 1,
                    pe.in_channels,
                    pe.out_channels,
                    s.channels
                )));
            }
            if pe.kernel == 0 || pe.stride == 0 {
                return Err(Error::Param(format!("stage {} has a zero kernel or stride", i + 1)));
            }
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::Param(format!(
                    "stage {}: {} channels cannot be split into {} heads",
                    i + 1,
                    s.channels,
                    s.heads
                )));
            }
            if s.lambdas.is_empty() || s.lambdas.iter().any(|&l| !(l >= 1.0)) {
                return Err(Error::Param(format!("stage {} has invalid reduction ratios", i + 1)));
            }
            in_ch = s.channels;
        }
        self.stage_grids()?;
        Ok(())
    }

    /// Differences from the reference layout of the named variants, and from
    /// the shared reduction-ratio schedule for everything. Custom configs are
    /// allowed; this only reports.
    pub fn table_deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let reference = match self.variant.as_str() {
            "T" => Some(Self::tiny()),
            "S" => Some(Self::small()),
            "B" => Some(Self::base()),
            _ => None,
        };
        if self.stages.len() != 4 {
            out.push(format!("{} stages instead of 4", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate().take(4) {
            if s.lambdas != LAMBDA_SCHEDULE[i] {
                out.push(format!("stage {} λ = {:?}, schedule says {:?}", i + 1, s.lambdas, LAMBDA_SCHEDULE[i]));
            }
            if let Some(r) = &reference {
                let t = &r.stages[i];
                if (s.layers, s.channels, s.heads) != (t.layers, t.channels, t.heads) {
                    out.push(format!(
                        "stage {} (L, C, H) = ({}, {}, {}), table says ({}, {}, {})",
                        i + 1,
                        s.layers,
                        s.channels,
                        s.heads,
                        t.layers,
                        t.channels,
                        t.heads
                    ));
                }
            }
        }
        out
    }
}
