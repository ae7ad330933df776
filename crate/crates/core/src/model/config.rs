use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the patch-token grid is collapsed into one vector per time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    MeanPool,
    Fte,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Bigru,
}

/// Frame-to-clip pooling used by the clip-level head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPooling {
    LinearSoftmax,
    Max,
    Mean,
}

macro_rules! string_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

string_enum!(EncoderKind { "mean_pool" => EncoderKind::MeanPool, "fte" => EncoderKind::Fte });
string_enum!(DecoderKind { "bigru" => DecoderKind::Bigru });
string_enum!(ClipPooling {
    "linear_softmax" => ClipPooling::LinearSoftmax,
    "max" => ClipPooling::Max,
    "mean" => ClipPooling::Mean,
});

/// Architecture hyperparameters. Grid geometry is always derived from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub frames: usize,
    pub clip_duration: Real,
    pub patch_height: usize,
    pub patch_width: usize,
    pub stride_freq: usize,
    pub stride_time: usize,
    /// Zero frames added on each side of the time axis before patching.
    #[serde(default)]
    pub time_pad: usize,
    pub embed_dim: usize,
    pub pte_depth: usize,
    pub pte_heads: usize,
    pub fte_depth: usize,
    pub fte_heads: usize,
    pub mlp_ratio: usize,
    pub upsample_ratio: usize,
    pub num_classes: usize,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub gru_hidden: usize,
    pub clip_pooling: ClipPooling,
    pub ln_eps: Real,
    /// Kept at 0; no dropout layer is applied while it is 0.
    pub dropout: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64 mel bands, 2 s clips.
    pub fn toy() -> Self {
        ModelConfig {
            mel_bins: 64,
            frames: 198,
            clip_duration: 2.0,
            patch_height: 16,
            patch_width: 16,
            stride_freq: 10,
            stride_time: 10,
            // 198 frames + 2*4 give 20 tokens 100 ms apart, which tiles the
            // 2 s clip and centres token t within 2.5 ms of its output step.
            time_pad: 4,
            embed_dim: 32,
            pte_depth: 2,
            pte_heads: 4,
            fte_depth: 2,
            fte_heads: 4,
            mlp_ratio: 4,
            upsample_ratio: 10,
            num_classes: 6,
            encoder: EncoderKind::Fte,
            decoder: DecoderKind::Bigru,
            gru_hidden: 16,
            clip_pooling: ClipPooling::LinearSoftmax,
            ln_eps: 1e-6,
            dropout: 0.0,
        }
    }

    /// The full-size geometry: 128 mel bands over 10 s, 768-wide tokens, 10 PTE blocks.
    pub fn full_scale() -> Self {
        ModelConfig {
            mel_bins: 128,
            frames: 1000,
            clip_duration: 10.0,
            time_pad: 0,
            embed_dim: 768,
            pte_depth: 10,
            pte_heads: 12,
            num_classes: 10,
            gru_hidden: 384,
            ..Self::toy()
        }
    }

    pub fn freq_patches(&self) -> usize {
        (self.mel_bins - self.patch_height) / self.stride_freq + 1
    }

    pub fn time_patches(&self) -> usize {
        (self.frames + 2 * self.time_pad - self.patch_width) / self.stride_time + 1
    }

    /// Length of the decoder output sequence.
    pub fn output_steps(&self) -> usize {
        self.time_patches() * self.upsample_ratio
    }

    pub fn seconds_per_step(&self) -> Real {
        self.clip_duration / self.output_steps() as Real
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("stride_freq", self.stride_freq),
            ("stride_time", self.stride_time),
            ("embed_dim", self.embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("gru_hidden", self.gru_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.upsample_ratio == 0 {
            return Err(Error::Config("model.upsample_ratio must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be at least 1".into()));
        }
        if self.pte_heads == 0 || self.embed_dim % self.pte_heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by model.pte_heads {}",
                self.embed_dim, self.pte_heads
            )));
        }
        if self.fte_heads == 0 || self.embed_dim % self.fte_heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by model.fte_heads {}",
                self.embed_dim, self.fte_heads
            )));
        }
        if self.mel_bins < self.patch_height || self.frames + 2 * self.time_pad < self.patch_width {
            return Err(Error::Config(format!(
                "input {}x{} is smaller than one {}x{} patch",
                self.mel_bins, self.frames, self.patch_height, self.patch_width
            )));
        }
        if !(self.clip_duration > 0.0) {
            return Err(Error::Config("model.clip_duration must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("model.dropout other than 0 is not supported".into()));
        }
        Ok(())
    }
}
