//! The miniature diffusion transformer: patch latents, joint self-attention
//! over noised and source tokens, camera and proxy-render conditioning through
//! cross-attention, and the flow-matching objective.

mod dit;
mod flow;
mod layers;
mod params;
pub mod fixtures;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ptv::PtvError;
use crate::tensor::TensorError;

pub use dit::{dit_forward, dit_velocity, Conditions, RenderCond};
pub use flow::{euler_integrate, euler_sample, fm_loss, forward_noise, gaussian, Denoiser, DitDenoiser, LinearOracle};
pub use layers::{
    additive_plucker_inject, camera_encoder, feedforward, joint_self_attention, latent_to_video,
    parallel_cross_attention, patchify, pool_frames, qs_cross_attention, rope_1d,
    self_attention, sequential_cross_attention, split_softmax_cross_attention,
    timestep_embedding, unpatchify, video_to_latent, CrossLayer, CrossSegment, RopeTable, SelfAttnWeights,
    LN_EPS, ROPE_BASE, TIME_DIM,
};
pub use params::{
    is_attention_group, is_injection_gate, is_render_pathway, Bound, Params, CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("conditions do not match variant {variant}: {msg}")]
    Conditions { variant: Variant, msg: String },
    #[error("{0}")]
    Shape(String),
    #[error("missing weight {0}")]
    MissingWeight(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{0}")]
    Ptv(#[from] PtvError),
}

/// Conditioning architecture. The first six are the comparison and ablation
/// variants; the last two use query-shared cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Camera tokens only, through cross-attention.
    PoseOnly,
    /// Proxy render only, through cross-attention.
    RenderOnly,
    /// Camera tokens and render, each through its own cross-attention layer,
    /// both applied to the same input and summed.
    BaselineFusionRt,
    /// Plücker field added to the noised tokens; render through cross-attention.
    BaselineFusionPlucker,
    /// Two full cross-attention layers (camera, then render) applied in sequence.
    NoQueryShared,
    /// One query projection, a separate softmax per condition, outputs summed.
    NoKvConcat,
    /// One query over concatenated camera and render keys/values, `[R|t]` input.
    QuerySharedRt,
    /// As [`Variant::QuerySharedRt`], with frame-pooled Plücker tokens as camera input.
    QuerySharedPlucker,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::PoseOnly,
        Variant::RenderOnly,
        Variant::BaselineFusionRt,
        Variant::BaselineFusionPlucker,
        Variant::NoQueryShared,
        Variant::NoKvConcat,
        Variant::QuerySharedRt,
        Variant::QuerySharedPlucker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PoseOnly => "pose-only",
            Variant::RenderOnly => "render-only",
            Variant::BaselineFusionRt => "baseline-fusion-rt",
            Variant::BaselineFusionPlucker => "baseline-fusion-plucker",
            Variant::NoQueryShared => "no-query-shared",
            Variant::NoKvConcat => "no-kv-concat",
            Variant::QuerySharedRt => "query-shared-rt",
            Variant::QuerySharedPlucker => "query-shared-plucker",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_camera(self) -> bool {
        self != Variant::RenderOnly
    }

    pub fn uses_render(self) -> bool {
        self != Variant::PoseOnly
    }

    /// How the camera condition is encoded.
    pub fn camera_input(self) -> CameraInput {
        match self {
            Variant::RenderOnly => CameraInput::None,
            Variant::BaselineFusionPlucker => CameraInput::PluckerField,
            Variant::QuerySharedPlucker => CameraInput::PluckerTokens,
            _ => CameraInput::Extrinsics,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Representation of the camera condition fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraInput {
    None,
    /// `frames × 12` flattened `[R|t]`, through the camera encoder.
    Extrinsics,
    /// Patchified Plücker field mean-pooled per frame, through the camera encoder.
    PluckerTokens,
    /// Patchified Plücker field on the latent grid, added to the noised tokens.
    PluckerField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            depth: 4,
            heads: 4,
            patch: 4,
            variant: Variant::QuerySharedRt,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "model dim {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if !(self.d / self.heads).is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.d / self.heads
            )));
        }
        if self.patch == 0 || self.depth == 0 {
            return Err(ModelError::Config("patch and depth must be positive".into()));
        }
        Ok(())
    }

    /// Width of a raw patch token: `3 · patch²`.
    pub fn latent_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn plucker_dim(&self) -> usize {
        6 * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Input width of the camera encoder, zero when it is absent.
    pub fn camera_in_dim(&self) -> usize {
        match self.variant.camera_input() {
            CameraInput::Extrinsics => 12,
            CameraInput::PluckerTokens => self.plucker_dim(),
            CameraInput::None | CameraInput::PluckerField => 0,
        }
    }

    /// Latent grid of a `frames × height × width` video.
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> Result<Grid, ModelError> {
        if !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(ModelError::Shape(format!(
                "patch {} does not divide {height}×{width}",
                self.patch
            )));
        }
        Ok(Grid {
            f: frames,
            h: height / self.patch,
            w: width / self.patch,
        })
    }
}

/// Token grid dimensions: token `(f, y, x)` sits at row `(f·h + y)·w + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.f * self.h * self.w
    }

    /// `(frame, row, col)` of every token in storage order.
    pub fn positions(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.tokens());
        for f in 0..self.f {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.push([f, y, x]);
                }
            }
        }
        out
    }

    pub fn frame_of(&self) -> Vec<usize> {
        (0..self.tokens()).map(|i| i / (self.h * self.w)).collect()
    }
}
