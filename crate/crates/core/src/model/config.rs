use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;

/// How the attention and graph streams are arranged inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// Both streams on the same input, adaptively fused.
    Parallel,
    /// Graph stream, then attention stream.
    SeqGcnThenAttn,
    /// Attention stream, then graph stream.
    SeqAttnThenGcn,
    AttnOnly,
    GcnOnly,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 5] =
        [Self::Parallel, Self::SeqGcnThenAttn, Self::SeqAttnThenGcn, Self::AttnOnly, Self::GcnOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parallel => "parallel",
            Self::SeqGcnThenAttn => "seq_gcn_then_attn",
            Self::SeqAttnThenGcn => "seq_attn_then_gcn",
            Self::AttnOnly => "attn_only",
            Self::GcnOnly => "gcn_only",
        }
    }

    pub fn has_attention(self) -> bool {
        self != Self::GcnOnly
    }

    pub fn has_gcn(self) -> bool {
        self != Self::AttnOnly
    }

    pub fn fuses(self) -> bool {
        self == Self::Parallel
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown composition mode `{s}`")))
    }
}

/// The four published model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    XS,
    S,
    B,
    L,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::XS, Self::S, Self::B, Self::L];

    /// `(blocks, width, frames)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Self::XS => (12, 64, 27),
            Self::S => (26, 64, 81),
            Self::B => (16, 128, 243),
            Self::L => (26, 128, 243),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::XS => "XS",
            Self::S => "S",
            Self::B => "B",
            Self::L => "L",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected XS, S, B or L)")))
    }
}

fn default_motion_dim() -> usize {
    512
}
fn default_heads() -> usize {
    8
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_temporal_k() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_output_unit() -> f64 {
    1000.0
}
fn default_pe_std() -> f64 {
    0.02
}
fn default_mode() -> CompositionMode {
    CompositionMode::Parallel
}
fn default_skeleton() -> SkeletonSpec {
    SkeletonSpec::h36m()
}

/// Every architecture hyperparameter. The joint count comes from `skeleton`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blocks.
    pub depth: usize,
    /// Hidden width `d`.
    pub dim: usize,
    /// Motion-semantic width `d′`.
    #[serde(default = "default_motion_dim")]
    pub motion_dim: usize,
    /// Input frames `T`.
    pub frames: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Neighbours per frame in the temporal graph.
    #[serde(default = "default_temporal_k")]
    pub temporal_k: usize,
    #[serde(default = "default_mode")]
    pub mode: CompositionMode,
    #[serde(default = "default_true")]
    pub spatial_pe: bool,
    #[serde(default)]
    pub temporal_pe: bool,
    /// Normalize after each residual sum instead of before each sublayer.
    #[serde(default)]
    pub post_norm: bool,
    /// Also link consecutive frames in the temporal graph.
    #[serde(default)]
    pub temporal_chain_union: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Millimetres per unit of the regression head output.
    #[serde(default = "default_output_unit")]
    pub output_unit_mm: f64,
    /// Standard deviation of the positional-embedding initialization.
    #[serde(default = "default_pe_std")]
    pub pe_init_std: f64,
    #[serde(default = "default_skeleton")]
    pub skeleton: SkeletonSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant(Variant::B)
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (depth, dim, frames) = v.dims();
        Self::custom(depth, dim, frames, default_heads(), SkeletonSpec::h36m())
    }

    pub fn custom(depth: usize, dim: usize, frames: usize, heads: usize, skeleton: SkeletonSpec) -> Self {
        Self {
            depth,
            dim,
            motion_dim: default_motion_dim(),
            frames,
            heads,
            mlp_ratio: default_mlp_ratio(),
            temporal_k: default_temporal_k(),
            mode: default_mode(),
            spatial_pe: true,
            temporal_pe: false,
            post_norm: false,
            temporal_chain_union: false,
            ln_eps: default_eps(),
            bn_eps: default_eps(),
            bn_momentum: default_bn_momentum(),
            output_unit_mm: default_output_unit(),
            pe_init_std: default_pe_std(),
            skeleton,
        }
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("motion_dim", self.motion_dim),
            ("frames", self.frames),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("temporal_k", self.temporal_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.output_unit_mm > 0.0) || !(self.ln_eps >= 0.0) || !(self.bn_eps >= 0.0) {
            return Err(Error::Config("output unit must be positive and eps nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        self.skeleton.validate()
    }
}
