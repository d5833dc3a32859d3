use serde::{Deserialize, Serialize};

use crate::encoders::{TextShape, Vocabulary};

/// Architecture hyper-parameters shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub text: TextShape,
    pub fourier_freqs: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 2,
            dim: 64,
            depth: 4,
            heads: 4,
            text: TextShape::default(),
            fourier_freqs: 8,
            vocab_size: Vocabulary::default().len(),
        }
    }
}

impl ModelConfig {
    /// Small profile used by the training experiments: 16px images on an
    /// 8x8 token grid, width 32, two blocks.
    pub fn desk() -> Self {
        Self {
            image_size: 16,
            patch: 2,
            dim: 32,
            depth: 2,
            ..Self::default()
        }
    }

    /// Tiny profile for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch: 2,
            dim: 16,
            depth: 2,
            heads: 2,
            text: TextShape {
                caption_len: 4,
                region_len: 2,
                max_entities: 3,
            },
            fourier_freqs: 2,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.patch > 0
            && self.image_size.is_multiple_of(self.patch)
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.dim.is_multiple_of(4)
            && self.depth > 0
            && self.vocab_size > 0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::invalid(format!("inconsistent model config {self:?}")))
        }
    }
}

/// How layout enters the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Base,
    Adapter,
    M3,
    Siam,
    SiamLora { rank: usize },
}

impl VariantTag {
    /// Rank used by the full-scale reference configuration.
    pub const FULL_SCALE_LORA_RANK: usize = 256;
    pub const DESK_LORA_RANK: usize = 8;

    pub fn name(&self) -> String {
        match self {
            Self::Base => "base".into(),
            Self::Adapter => "adapter".into(),
            Self::M3 => "m3".into(),
            Self::Siam => "siam".into(),
            Self::SiamLora { rank } => format!("siam-lora{rank}"),
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "base" => Self::Base,
            "adapter" => Self::Adapter,
            "m3" => Self::M3,
            "siam" => Self::Siam,
            "siam-lora" | "siamlora" => Self::SiamLora {
                rank: Self::DESK_LORA_RANK,
            },
            other => match other.strip_prefix("siam-lora") {
                Some(r) => Self::SiamLora {
                    rank: r
                        .parse()
                        .map_err(|_| crate::error::invalid(format!("bad LoRA rank in `{other}`")))?,
                },
                None => return Err(crate::error::invalid(format!("unknown variant `{other}`"))),
            },
        })
    }
}

impl std::fmt::Display for VariantTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}
