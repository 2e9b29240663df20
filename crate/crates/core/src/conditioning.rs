//! Model inputs built from dataset samples: latents plus the camera and
//! render conditions in the representation each variant expects.

use crate::geometry::{plucker_field, Trajectory};
use crate::model::{
    patchify, pool_frames, video_to_latent, CameraInput, Conditions, Grid, ModelConfig, ModelError,
    RenderCond,
};
use crate::renderer::ProxyVideo;
use crate::scenegen::Sample;
use crate::tensor::{Float, Tensor};

/// Spatial reduction of the proxy render relative to the source video.
pub const RENDER_DOWNSAMPLE: usize = 4;

/// Clean target latent and every condition the variant accepts.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub z0: Tensor<T>,
    pub cond: Conditions<T>,
}

/// Camera condition for `traj` (normalized to its first frame) on `grid`.
pub fn camera_condition<T: Float>(
    cfg: &ModelConfig,
    traj: &Trajectory,
    grid: Grid,
) -> Result<Option<Tensor<T>>, ModelError> {
    let traj = traj.normalize_to_first();
    if traj.len() != grid.f {
        return Err(ModelError::Shape(format!(
            "trajectory has {} poses for {} frames",
            traj.len(),
            grid.f
        )));
    }
    let input = cfg.variant.camera_input();
    let fields = || -> Result<Tensor<T>, ModelError> {
        let intr = &traj.intrinsics;
        let mut data = Vec::with_capacity(traj.len() * 6 * intr.height * intr.width);
        for p in &traj.poses {
            data.extend_from_slice(plucker_field(p, intr).data());
        }
        let field = Tensor::new([traj.len(), 6, intr.height, intr.width], data)?;
        let (tokens, pgrid) = patchify(&field.cast::<T>(), cfg.patch)?;
        if pgrid != grid {
            return Err(ModelError::Shape(format!(
                "Plücker grid {pgrid:?} differs from latent grid {grid:?}"
            )));
        }
        Ok(tokens)
    };
    Ok(match input {
        CameraInput::None => None,
        CameraInput::Extrinsics => {
            Some(Tensor::<f64>::new([traj.len(), 12], traj.extrinsic_rows())?.cast())
        }
        CameraInput::PluckerTokens => Some(pool_frames(&fields()?, grid)?),
        CameraInput::PluckerField => Some(fields()?),
    })
}

/// Render tokens of a proxy video plus the uncovered fraction of each patch.
pub fn render_condition<T: Float>(cfg: &ModelConfig, proxy: &ProxyVideo) -> Result<RenderCond<T>, ModelError> {
    let (tokens, grid) = video_to_latent::<T>(&proxy.rgb, cfg.patch)?;
    let s = proxy.mask.shape();
    let mask = proxy.mask.clone().reshape(vec![s[0], 1, s[1], s[2]])?;
    let (cells, _) = patchify(&mask.cast::<T>(), cfg.patch)?;
    let inv = 1.0 / (cfg.patch * cfg.patch) as f64;
    let hole: Vec<T> = cells
        .data()
        .chunks(cfg.patch * cfg.patch)
        .map(|c| {
            let covered: f64 = c.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
            T::from_f64c(1.0 - covered * inv)
        })
        .collect();
    Ok(RenderCond {
        hole: Tensor::new([grid.tokens(), 1], hole)?,
        tokens,
        grid,
    })
}

/// Builds the training/evaluation inputs of one sample. `proxy` is required
/// exactly when the variant has a render pathway.
pub fn build_example<T: Float>(
    cfg: &ModelConfig,
    sample: &Sample,
    proxy: Option<&ProxyVideo>,
) -> Result<Example<T>, ModelError> {
    let (z0, grid) = video_to_latent::<T>(&sample.tgt, cfg.patch)?;
    let (src, _) = video_to_latent::<T>(&sample.src, cfg.patch)?;
    let cam = camera_condition(cfg, &sample.tgt_traj, grid)?;
    let render = match (cfg.variant.uses_render(), proxy) {
        (true, Some(p)) => Some(render_condition(cfg, p)?),
        (true, None) => {
            return Err(ModelError::Conditions {
                variant: cfg.variant,
                msg: "a proxy render is required".into(),
            })
        }
        (false, _) => None,
    };
    Ok(Example {
        z0,
        cond: Conditions { grid, src, cam, render },
    })
}
