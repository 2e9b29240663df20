//! Building blocks of the transformer, each a function of graph variables so
//! that tests can drive them with hand-made weights.

use std::sync::Arc;

use crate::tensor::{Float, Graph, Tensor, TensorError, Var};
use crate::video::Video;

use super::{Grid, ModelError};

pub const ROPE_BASE: f64 = 10_000.0;
/// Width of the sinusoidal timestep features.
pub const TIME_DIM: usize = 64;
pub const LN_EPS: f64 = 1e-5;

/// Space-to-depth: `frames × channels × H × W` → `(frames·H/p·W/p) × (channels·p²)`.
///
/// Within a token the layout is channel-major, then patch row, then patch column.
pub fn patchify<T: Float>(x: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, Grid), ModelError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(ModelError::Shape(format!("patchify expects F×C×H×W, got {s:?}")));
    }
    let (f, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || hh % patch != 0 || ww % patch != 0 {
        return Err(ModelError::Shape(format!("patch {patch} does not divide {hh}×{ww}")));
    }
    let grid = Grid {
        f,
        h: hh / patch,
        w: ww / patch,
    };
    let dim = c * patch * patch;
    let src = x.data();
    let mut out = vec![T::zero(); grid.tokens() * dim];
    for fi in 0..f {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let row = (fi * grid.h + gy) * grid.w + gx;
                let dst = &mut out[row * dim..(row + 1) * dim];
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let (y, xx) = (gy * patch + dy, gx * patch + dx);
                            dst[(ch * patch + dy) * patch + dx] =
                                src[((fi * c + ch) * hh + y) * ww + xx];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new([grid.tokens(), dim], out)?, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(
    tokens: &Tensor<T>,
    grid: Grid,
    channels: usize,
    patch: usize,
) -> Result<Tensor<T>, ModelError> {
    let dim = channels * patch * patch;
    if tokens.shape() != [grid.tokens(), dim] {
        return Err(ModelError::Shape(format!(
            "unpatchify expects {}×{dim} tokens, got {:?}",
            grid.tokens(),
            tokens.shape()
        )));
    }
    let (hh, ww) = (grid.h * patch, grid.w * patch);
    let mut out = vec![T::zero(); grid.f * channels * hh * ww];
    let src = tokens.data();
    for fi in 0..grid.f {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let row = (fi * grid.h + gy) * grid.w + gx;
                for ch in 0..channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let (y, xx) = (gy * patch + dy, gx * patch + dx);
                            out[((fi * channels + ch) * hh + y) * ww + xx] =
                                src[row * dim + (ch * patch + dy) * patch + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new([grid.f, channels, hh, ww], out)?)
}

/// Patch tokens of a video, rescaled from `[0, 1]` to `[-1, 1]`.
pub fn video_to_latent<T: Float>(video: &Video, patch: usize) -> Result<(Tensor<T>, Grid), ModelError> {
    let scaled = video.0.cast::<T>().map(|v| v + v - T::one());
    patchify(&scaled, patch)
}

/// Inverse of [`video_to_latent`], clamped to the displayable range.
pub fn latent_to_video<T: Float>(z: &Tensor<T>, grid: Grid, patch: usize) -> Result<Video, ModelError> {
    let half = T::from_f64c(0.5);
    let t = unpatchify(z, grid, 3, patch)?.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()));
    Ok(Video(t.cast::<f32>()))
}

/// Mean over the spatial tokens of every frame: `(f·h·w) × c` → `f × c`.
pub fn pool_frames<T: Float>(tokens: &Tensor<T>, grid: Grid) -> Result<Tensor<T>, ModelError> {
    if tokens.rows() != grid.tokens() {
        return Err(ModelError::Shape(format!(
            "pool_frames: {} tokens for a grid of {}",
            tokens.rows(),
            grid.tokens()
        )));
    }
    let c = tokens.cols();
    let per = grid.h * grid.w;
    let inv = T::one() / T::from_usize(per).unwrap();
    let mut out = vec![T::zero(); grid.f * c];
    for (i, row) in tokens.data().chunks(c).enumerate() {
        let dst = &mut out[(i / per) * c..(i / per + 1) * c];
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
    for v in out.iter_mut() {
        *v *= inv;
    }
    Ok(Tensor::new([grid.f, c], out)?)
}

/// Per-row rotation angles for rotary embeddings, shared by all heads.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub cos: Arc<Vec<T>>,
    pub sin: Arc<Vec<T>>,
    pub rows: usize,
    pub half: usize,
}

impl<T: Float> RopeTable<T> {
    fn from_angles(angles: Vec<f64>, rows: usize, half: usize) -> Self {
        Self {
            cos: Arc::new(angles.iter().map(|a| T::from_f64c(a.cos())).collect()),
            sin: Arc::new(angles.iter().map(|a| T::from_f64c(a.sin())).collect()),
            rows,
            half,
        }
    }

    /// Pair `j` of a row at position `p` turns by `p · base^(−2j/head_dim)`.
    pub fn one_d(positions: &[usize], head_dim: usize) -> Result<Self, ModelError> {
        if !head_dim.is_multiple_of(2) {
            return Err(ModelError::Shape(format!("rotary dim {head_dim} is odd")));
        }
        let half = head_dim / 2;
        let mut angles = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for j in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                angles.push(p as f64 * theta);
            }
        }
        Ok(Self::from_angles(angles, positions.len(), half))
    }

    /// Factored frame/row/column rotation: the pairs of each head are split
    /// into three groups, each a 1D rotary code of one grid axis. Rows and
    /// columns get `⌊pairs/3⌋` pairs each, frames the rest; a group of `m`
    /// pairs turns pair `j` by `position · base^(−j/m)`.
    pub fn grid(grid: Grid, head_dim: usize) -> Result<Self, ModelError> {
        Self::from_positions(&grid.positions(), head_dim)
    }

    /// [`RopeTable::grid`] for explicit `(frame, row, col)` positions.
    pub fn from_positions(positions: &[[usize; 3]], head_dim: usize) -> Result<Self, ModelError> {
        if !head_dim.is_multiple_of(2) {
            return Err(ModelError::Shape(format!("rotary dim {head_dim} is odd")));
        }
        let half = head_dim / 2;
        let n_row = half / 3;
        let n_col = half / 3;
        let n_frame = half - n_row - n_col;
        let groups = [(0usize, n_frame), (1, n_row), (2, n_col)];
        let mut angles = Vec::with_capacity(positions.len() * half);
        for pos in positions {
            for &(axis, m) in &groups {
                for j in 0..m {
                    let theta = ROPE_BASE.powf(-(j as f64) / m as f64);
                    angles.push(pos[axis] as f64 * theta);
                }
            }
        }
        Ok(Self::from_angles(angles, positions.len(), half))
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &Self) -> Self {
        assert_eq!(self.half, other.half, "rotary tables of different widths");
        let cat = |a: &Arc<Vec<T>>, b: &Arc<Vec<T>>| Arc::new([a.as_slice(), b.as_slice()].concat());
        Self {
            cos: cat(&self.cos, &other.cos),
            sin: cat(&self.sin, &other.sin),
            rows: self.rows + other.rows,
            half: self.half,
        }
    }

    pub fn apply(&self, g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var, TensorError> {
        g.rope(x, self.cos.clone(), self.sin.clone(), heads)
    }
}

/// Rotary embedding of `tokens` (rows × d, single head) at the given positions.
pub fn rope_1d<T: Float>(g: &mut Graph<T>, tokens: Var, positions: &[usize]) -> Result<Var, ModelError> {
    let d = g.value(tokens).cols();
    let table = RopeTable::one_d(positions, d)?;
    Ok(table.apply(g, tokens, 1)?)
}

/// Four linear layers with SiLU between them: `in → d → d → d → d`.
pub fn camera_encoder<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    layers: &[(Var, Var); 4],
) -> Result<Var, ModelError> {
    let want = g.shape(layers[0].0)[0];
    let got = g.value(x).cols();
    if got != want {
        return Err(ModelError::Shape(format!(
            "camera encoder expects {want} input features, got {got}"
        )));
    }
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.linear(h, w, Some(b))?;
        if i < 3 {
            h = g.silu(h);
        }
    }
    Ok(h)
}

/// Sinusoidal features of `t ∈ [0, 1]`: `[sin(1000 t ω_k), cos(1000 t ω_k)]`
/// with `ω_k = 10000^(−k/(dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(ROPE_BASE.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttnWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Pre-norm residual self-attention: `x + o(attn(rope(q), rope(k), v))`.
pub fn self_attention<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w: &SelfAttnWeights,
    rope: Option<&RopeTable<T>>,
    heads: usize,
) -> Result<Var, ModelError> {
    let h = g.layer_norm(x, T::from_f64c(LN_EPS));
    let mut q = g.linear(h, w.q, None)?;
    let mut k = g.linear(h, w.k, None)?;
    let v = g.linear(h, w.v, None)?;
    if let Some(r) = rope {
        q = r.apply(g, q, heads)?;
        k = r.apply(g, k, heads)?;
    }
    let a = g.attention(q, k, v, heads, None)?;
    let o = g.linear(a, w.o, None)?;
    Ok(g.add(x, o)?)
}

/// Self-attention over `[z_t, z_src]` stacked along the token axis, both
/// grids sharing the positional code, then split back.
pub fn joint_self_attention<T: Float>(
    g: &mut Graph<T>,
    z_t: Var,
    z_src: Var,
    w: &SelfAttnWeights,
    rope: Option<&RopeTable<T>>,
    heads: usize,
) -> Result<(Var, Var), ModelError> {
    if g.shape(z_t) != g.shape(z_src) {
        return Err(ModelError::Shape(format!(
            "joint self-attention over {:?} and {:?}",
            g.shape(z_t),
            g.shape(z_src)
        )));
    }
    let n = g.value(z_t).rows();
    let x = g.concat_rows(&[z_t, z_src])?;
    let stacked = rope.map(|r| r.stack(r));
    let y = self_attention(g, x, w, stacked.as_ref(), heads)?;
    Ok((g.slice_rows(y, 0, n)?, g.slice_rows(y, n, n)?))
}

/// Pre-norm residual MLP `x + w2 · silu(w1 · ln(x) + b1) + b2`.
pub fn feedforward<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, ModelError> {
    let h = g.layer_norm(x, T::from_f64c(LN_EPS));
    let h = g.linear(h, w1, Some(b1))?;
    let h = g.silu(h);
    let h = g.linear(h, w2, Some(b2))?;
    Ok(g.add(x, h)?)
}

/// One conditioning source of a cross-attention: its tokens, key and value
/// projections, and optional rotary code for the keys.
#[derive(Clone, Copy, Debug)]
pub struct CrossSegment<'a, T> {
    pub tokens: Var,
    pub k: Var,
    pub v: Var,
    pub rope: Option<&'a RopeTable<T>>,
}

fn project_query<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_w: Var,
    q_rope: Option<&RopeTable<T>>,
    heads: usize,
) -> Result<Var, ModelError> {
    let q = g.linear(z, q_w, None)?;
    Ok(match q_rope {
        Some(r) => r.apply(g, q, heads)?,
        None => q,
    })
}

fn project_segment<T: Float>(
    g: &mut Graph<T>,
    s: &CrossSegment<'_, T>,
    heads: usize,
) -> Result<(Var, Var), ModelError> {
    let k = g.linear(s.tokens, s.k, None)?;
    let k = match s.rope {
        Some(r) => r.apply(g, k, heads)?,
        None => k,
    };
    let v = g.linear(s.tokens, s.v, None)?;
    Ok((k, v))
}

fn require_segments<T>(segments: &[CrossSegment<'_, T>]) -> Result<(), ModelError> {
    if segments.is_empty() {
        return Err(ModelError::Shape("cross-attention without any condition".into()));
    }
    Ok(())
}

/// `projector(softmax(Q [K_1, K_2, …]ᵀ/√d_q) [V_1, V_2, …])`, without the residual.
#[allow(clippy::too_many_arguments)]
fn concat_delta<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_w: Var,
    q_rope: Option<&RopeTable<T>>,
    segments: &[CrossSegment<'_, T>],
    proj: Var,
    heads: usize,
    key_mask: Option<Arc<Vec<bool>>>,
) -> Result<Var, ModelError> {
    require_segments(segments)?;
    let q = project_query(g, z, q_w, q_rope, heads)?;
    let mut ks = Vec::with_capacity(segments.len());
    let mut vs = Vec::with_capacity(segments.len());
    for s in segments {
        let (k, v) = project_segment(g, s, heads)?;
        ks.push(k);
        vs.push(v);
    }
    let (k, v) = if ks.len() == 1 {
        (ks[0], vs[0])
    } else {
        (g.concat_rows(&ks)?, g.concat_rows(&vs)?)
    };
    let a = g.attention(q, k, v, heads, key_mask)?;
    Ok(g.linear(a, proj, None)?)
}

/// Query-shared cross-attention: one query projection of `z` attends over the
/// keys and values of all segments concatenated along the token axis;
/// the projected result is added to `z`.
///
/// `key_mask`, when given, covers the concatenated keys in segment order.
#[allow(clippy::too_many_arguments)]
pub fn qs_cross_attention<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_w: Var,
    q_rope: Option<&RopeTable<T>>,
    segments: &[CrossSegment<'_, T>],
    proj: Var,
    heads: usize,
    key_mask: Option<Arc<Vec<bool>>>,
) -> Result<Var, ModelError> {
    let delta = concat_delta(g, z, q_w, q_rope, segments, proj, heads, key_mask)?;
    Ok(g.add(z, delta)?)
}

/// Shared query, an independent softmax over each segment's keys, outputs
/// summed before a single projector.
pub fn split_softmax_cross_attention<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_w: Var,
    q_rope: Option<&RopeTable<T>>,
    segments: &[CrossSegment<'_, T>],
    proj: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    require_segments(segments)?;
    let q = project_query(g, z, q_w, q_rope, heads)?;
    let mut acc: Option<Var> = None;
    for s in segments {
        let (k, v) = project_segment(g, s, heads)?;
        let a = g.attention(q, k, v, heads, None)?;
        acc = Some(match acc {
            None => a,
            Some(prev) => g.add(prev, a)?,
        });
    }
    let delta = g.linear(acc.expect("at least one segment"), proj, None)?;
    Ok(g.add(z, delta)?)
}

/// A complete single-condition cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct CrossLayer<'a, T> {
    pub q: Var,
    pub segment: CrossSegment<'a, T>,
    pub proj: Var,
}

/// Independent cross-attention layers applied one after another, each
/// reading the output of the previous one.
pub fn sequential_cross_attention<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_rope: Option<&RopeTable<T>>,
    layers: &[CrossLayer<'_, T>],
    heads: usize,
) -> Result<Var, ModelError> {
    if layers.is_empty() {
        return Err(ModelError::Shape("cross-attention without any condition".into()));
    }
    let mut z = z;
    for l in layers {
        z = qs_cross_attention(g, z, l.q, q_rope, &[l.segment], l.proj, heads, None)?;
    }
    Ok(z)
}

/// Independent cross-attention layers all reading `z`; their projected
/// outputs are added to `z`.
pub fn parallel_cross_attention<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    q_rope: Option<&RopeTable<T>>,
    layers: &[CrossLayer<'_, T>],
    heads: usize,
) -> Result<Var, ModelError> {
    if layers.is_empty() {
        return Err(ModelError::Shape("cross-attention without any condition".into()));
    }
    let mut out = z;
    for l in layers {
        let delta = concat_delta(g, z, l.q, q_rope, &[l.segment], l.proj, heads, None)?;
        out = g.add(out, delta)?;
    }
    Ok(out)
}

/// `z + plucker · w`, the additive Plücker conditioning of the baseline.
pub fn additive_plucker_inject<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    plucker: Var,
    w: Var,
) -> Result<Var, ModelError> {
    if g.value(z).rows() != g.value(plucker).rows() {
        return Err(ModelError::Shape(format!(
            "Plücker tokens {:?} do not match the latent grid {:?}",
            g.shape(plucker),
            g.shape(z)
        )));
    }
    let inc = g.linear(plucker, w, None)?;
    Ok(g.add(z, inc)?)
}
