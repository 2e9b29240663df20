//! The full denoiser: embedding, conditioning pathways, blocks and output head.

use crate::tensor::{Float, Graph, Tensor, Var};

use super::layers::{
    additive_plucker_inject, camera_encoder, feedforward, joint_self_attention,
    parallel_cross_attention, qs_cross_attention, self_attention, sequential_cross_attention,
    split_softmax_cross_attention, timestep_embedding, CrossLayer, CrossSegment, RopeTable,
    SelfAttnWeights, LN_EPS,
};
use super::params::Bound;
use super::{CameraInput, Grid, ModelConfig, ModelError, Params, Variant, TIME_DIM};

/// Proxy-render condition: patch tokens of the downsampled render plus, per
/// token, the fraction of its pixels that received no point.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderCond<T> {
    pub tokens: Tensor<T>,
    pub hole: Tensor<T>,
    pub grid: Grid,
}

/// Everything the denoiser sees besides `z_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions<T> {
    pub grid: Grid,
    /// Source latent, same grid as `z_t`.
    pub src: Tensor<T>,
    /// Camera condition in the variant's representation: `frames × 12`
    /// extrinsics, `frames × 6p²` pooled Plücker tokens, or `(f·h·w) × 6p²`
    /// Plücker patches for the additive baseline.
    pub cam: Option<Tensor<T>>,
    pub render: Option<RenderCond<T>>,
}

impl<T: Float> Conditions<T> {
    /// Same conditions with the camera and/or render removed.
    pub fn restricted(&self, cam: bool, render: bool) -> Self {
        Self {
            grid: self.grid,
            src: self.src.clone(),
            cam: if cam { self.cam.clone() } else { None },
            render: if render { self.render.clone() } else { None },
        }
    }
}

fn check_conditions<T: Float>(
    cfg: &ModelConfig,
    z_shape: &[usize],
    c: &Conditions<T>,
) -> Result<(), ModelError> {
    let v = cfg.variant;
    let bad = |msg: String| ModelError::Conditions { variant: v, msg };
    let n = c.grid.tokens();
    if z_shape != [n, cfg.latent_dim()] {
        return Err(ModelError::Shape(format!(
            "z_t has shape {z_shape:?}, grid needs {n}×{}",
            cfg.latent_dim()
        )));
    }
    if c.src.shape() != z_shape {
        return Err(ModelError::Shape(format!(
            "source latent {:?} differs from z_t {z_shape:?}",
            c.src.shape()
        )));
    }
    if c.cam.is_none() && c.render.is_none() {
        return Err(bad("no camera or render condition given".into()));
    }
    if let Some(cam) = &c.cam {
        let (rows, cols) = match v.camera_input() {
            CameraInput::None => return Err(bad("variant has no camera pathway".into())),
            CameraInput::Extrinsics => (c.grid.f, 12),
            CameraInput::PluckerTokens => (c.grid.f, cfg.plucker_dim()),
            CameraInput::PluckerField => (n, cfg.plucker_dim()),
        };
        if cam.shape() != [rows, cols] {
            return Err(bad(format!("camera condition {:?}, expected {rows}×{cols}", cam.shape())));
        }
    }
    if let Some(r) = &c.render {
        if !v.uses_render() {
            return Err(bad("variant has no render pathway".into()));
        }
        let nr = r.grid.tokens();
        if r.tokens.shape() != [nr, cfg.latent_dim()] || r.hole.shape() != [nr, 1] {
            return Err(bad(format!(
                "render tokens {:?} / hole {:?} for a {}-token grid",
                r.tokens.shape(),
                r.hole.shape(),
                nr
            )));
        }
        if r.grid.f != c.grid.f {
            return Err(bad(format!("render has {} frames, latent {}", r.grid.f, c.grid.f)));
        }
    }
    Ok(())
}

fn attn_weights(w: &Bound, b: usize) -> Result<SelfAttnWeights, ModelError> {
    Ok(SelfAttnWeights {
        q: w.get(&format!("blk{b}.attn.q"))?,
        k: w.get(&format!("blk{b}.attn.k"))?,
        v: w.get(&format!("blk{b}.attn.v"))?,
        o: w.get(&format!("blk{b}.attn.o"))?,
    })
}

/// Velocity prediction for `z_t` (`(f·h·w) × 3p²`) at time `t`.
///
/// Per block: joint self-attention over `[z_t, z_src]`, condition injection
/// according to the variant, then a feedforward layer. The timestep is
/// embedded once and added to every `z_t` token; render tokens pass through the
/// first block's self-attention before serving as keys and values.
pub fn dit_forward<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    cfg: &ModelConfig,
    z_t: Var,
    t: f64,
    cond: &Conditions<T>,
) -> Result<Var, ModelError> {
    check_conditions(cfg, g.shape(z_t), cond)?;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let grid = cond.grid;
    let grid_rope = RopeTable::grid(grid, hd)?;
    let query_rope = RopeTable::one_d(&grid.frame_of(), hd)?;
    let cam_rope = RopeTable::one_d(&(0..grid.f).collect::<Vec<_>>(), hd)?;

    let embed_w = w.get("embed.w")?;
    let embed_b = w.get("embed.b")?;
    let mut zt = g.linear(z_t, embed_w, Some(embed_b))?;
    let tfeat = timestep_embedding(t, TIME_DIM);
    let tfeat = g.constant(Tensor::from_f64([1, TIME_DIM], &tfeat)?);
    let temb = g.linear(tfeat, w.get("time.w")?, Some(w.get("time.b")?))?;
    zt = g.add_row(zt, temb)?;
    let src = g.constant(cond.src.clone());
    let mut zs = g.linear(src, embed_w, Some(embed_b))?;
    zs = g.add_row(zs, w.get("src.tag")?)?;

    let mut cam_tokens = None;
    if let Some(cam) = &cond.cam {
        let cam = g.constant(cam.clone());
        match cfg.variant.camera_input() {
            CameraInput::PluckerField => {
                zt = additive_plucker_inject(g, zt, cam, w.get("plucker.w")?)?;
            }
            CameraInput::Extrinsics | CameraInput::PluckerTokens => {
                let layers = [0, 1, 2, 3].map(|i| {
                    (w.get(&format!("cam.l{i}.w")), w.get(&format!("cam.l{i}.b")))
                });
                let mut l = Vec::with_capacity(4);
                for (a, b) in layers {
                    l.push((a?, b?));
                }
                let layers = [l[0], l[1], l[2], l[3]];
                cam_tokens = Some(camera_encoder(g, cam, &layers)?);
            }
            CameraInput::None => unreachable!("rejected by check_conditions"),
        }
    }

    let mut render_tokens = None;
    let mut render_rope = None;
    if let Some(r) = &cond.render {
        let rt = g.constant(r.tokens.clone());
        let mut x = g.linear(rt, embed_w, Some(embed_b))?;
        let hole = g.constant(r.hole.clone());
        let hole_emb = g.reshape(w.get("render.hole")?, &[1, cfg.d])?;
        let fill = g.matmul(hole, hole_emb)?;
        x = g.add(x, fill)?;
        let shared = attn_weights(w, 0)?;
        let rg = RopeTable::grid(r.grid, hd)?;
        x = self_attention(g, x, &shared, Some(&rg), heads)?;
        render_tokens = Some(x);
        render_rope = Some(RopeTable::one_d(&r.grid.frame_of(), hd)?);
    }

    for b in 0..cfg.depth {
        let aw = attn_weights(w, b)?;
        let (a, s) = joint_self_attention(g, zt, zs, &aw, Some(&grid_rope), heads)?;
        zt = a;
        zs = s;
        zt = inject(
            g,
            w,
            cfg.variant,
            b,
            zt,
            &query_rope,
            cam_tokens.map(|c| (c, &cam_rope)),
            render_tokens.zip(render_rope.as_ref()),
            heads,
        )?;
        let ff = |n: &str| w.get(&format!("blk{b}.ff.{n}"));
        let (w1, b1, w2, b2) = (ff("w1")?, ff("b1")?, ff("w2")?, ff("b2")?);
        zt = feedforward(g, zt, w1, b1, w2, b2)?;
        if b + 1 < cfg.depth {
            zs = feedforward(g, zs, w1, b1, w2, b2)?;
        }
    }
    let h = g.layer_norm(zt, T::from_f64c(LN_EPS));
    Ok(g.linear(h, w.get("head.w")?, Some(w.get("head.b")?))?)
}

#[allow(clippy::too_many_arguments)]
fn inject<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    variant: Variant,
    b: usize,
    zt: Var,
    query_rope: &RopeTable<T>,
    cam: Option<(Var, &RopeTable<T>)>,
    render: Option<(Var, &RopeTable<T>)>,
    heads: usize,
) -> Result<Var, ModelError> {
    let name = |n: &str| w.get(&format!("blk{b}.{n}"));
    fn seg<'r, T>(
        w: &Bound,
        b: usize,
        tokens: Var,
        rope: &'r RopeTable<T>,
        k: &str,
        v: &str,
    ) -> Result<CrossSegment<'r, T>, ModelError> {
        Ok(CrossSegment {
            tokens,
            k: w.get(&format!("blk{b}.{k}"))?,
            v: w.get(&format!("blk{b}.{v}"))?,
            rope: Some(rope),
        })
    }
    match variant {
        Variant::PoseOnly
        | Variant::RenderOnly
        | Variant::BaselineFusionPlucker
        | Variant::QuerySharedRt
        | Variant::QuerySharedPlucker
        | Variant::NoKvConcat => {
            let mut segs = Vec::new();
            if let Some((t, r)) = render {
                segs.push(seg(w, b, t, r, "cross.k_render", "cross.v_render")?);
            }
            if let Some((t, r)) = cam.filter(|_| variant != Variant::BaselineFusionPlucker) {
                segs.push(seg(w, b, t, r, "cross.k_cam", "cross.v_cam")?);
            }
            if segs.is_empty() {
                return Ok(zt);
            }
            let (q, proj) = (name("cross.q")?, name("cross.proj")?);
            if variant == Variant::NoKvConcat {
                split_softmax_cross_attention(g, zt, q, Some(query_rope), &segs, proj, heads)
            } else {
                qs_cross_attention(g, zt, q, Some(query_rope), &segs, proj, heads, None)
            }
        }
        Variant::NoQueryShared | Variant::BaselineFusionRt => {
            let mut layers = Vec::new();
            if let Some((t, r)) = cam {
                layers.push(CrossLayer {
                    q: name("cross_cam.q")?,
                    segment: seg(w, b, t, r, "cross_cam.k", "cross_cam.v")?,
                    proj: name("cross_cam.proj")?,
                });
            }
            if let Some((t, r)) = render {
                layers.push(CrossLayer {
                    q: name("cross_render.q")?,
                    segment: seg(w, b, t, r, "cross_render.k", "cross_render.v")?,
                    proj: name("cross_render.proj")?,
                });
            }
            if layers.is_empty() {
                return Ok(zt);
            }
            if variant == Variant::NoQueryShared {
                sequential_cross_attention(g, zt, Some(query_rope), &layers, heads)
            } else {
                parallel_cross_attention(g, zt, Some(query_rope), &layers, heads)
            }
        }
    }
}

/// Forward pass without gradients.
pub fn dit_velocity<T: Float>(
    params: &Params<T>,
    z_t: &Tensor<T>,
    t: f64,
    cond: &Conditions<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let w = params.bind(&mut g, |_| false);
    let z = g.constant(z_t.clone());
    let out = dit_forward(&mut g, &w, &params.config, z, t, cond)?;
    Ok(g.value(out).clone())
}
