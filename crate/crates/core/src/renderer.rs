//! Proxy rendering: lift RGB-D frames to world-space points and splat them
//! into a target camera with a one-pixel z-buffer.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose, Trajectory};
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("frame count mismatch: rgb {rgb}, depth {depth}, source poses {src}, target poses {tgt}")]
    FrameCount {
        rgb: usize,
        depth: usize,
        src: usize,
        tgt: usize,
    },
}

/// Metric camera-axis depth per pixel, `frames × height × width`.
/// Non-positive or non-finite entries mark pixels without geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthVideo(pub Tensor<f32>);

impl DepthVideo {
    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.0.data()[f * n..(f + 1) * n]
    }
}

pub fn is_valid_depth(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub xyz: Vec<Vector3<f64>>,
    pub rgb: Vec<[f32; 3]>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// Planar `3 × h × w`.
    pub rgb: Vec<f32>,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl RenderedFrame {
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// One world-space point per valid pixel of a planar `3 × h × w` frame.
pub fn lift_to_points(
    rgb: &[f32],
    depth: &[f32],
    pose: &Pose,
    intr: &Intrinsics,
) -> Result<PointSet, RenderError> {
    let (h, w) = (intr.height, intr.width);
    if rgb.len() != 3 * h * w || depth.len() != h * w {
        return Err(RenderError::Dimensions(format!(
            "rgb {} / depth {} values for a {w}×{h} camera",
            rgb.len(),
            depth.len()
        )));
    }
    let mut pts = PointSet::default();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let d = depth[i];
            if !is_valid_depth(d) {
                continue;
            }
            let cam = intr.ray(u as f64, v as f64) * d as f64;
            pts.xyz.push(pose.camera_to_world(&cam));
            pts.rgb.push([rgb[i], rgb[h * w + i], rgb[2 * h * w + i]]);
        }
    }
    Ok(pts)
}

/// Z-buffered one-pixel splatting of `points` into an `out_h × out_w` image
/// of the camera `(pose, intr)`, with `intr` rescaled to the output size.
///
/// The nearest point wins; exact depth ties go to the lower point index.
pub fn splat_render(
    points: &PointSet,
    pose: &Pose,
    intr: &Intrinsics,
    out_h: usize,
    out_w: usize,
) -> RenderedFrame {
    let sx = out_w as f64 / intr.width as f64;
    let sy = out_h as f64 / intr.height as f64;
    let (fx, fy) = (intr.fx * sx, intr.fy * sy);
    let (cx, cy) = ((intr.cx + 0.5) * sx - 0.5, (intr.cy + 0.5) * sy - 0.5);
    let n = out_h * out_w;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut owner = vec![usize::MAX; n];
    for (idx, p) in points.xyz.iter().enumerate() {
        let c = pose.world_to_camera(p);
        if c.z <= 1e-9 {
            continue;
        }
        let u = (fx * c.x / c.z + cx).round();
        let v = (fy * c.y / c.z + cy).round();
        if !(u >= 0.0 && v >= 0.0 && u < out_w as f64 && v < out_h as f64) {
            continue;
        }
        let pix = v as usize * out_w + u as usize;
        if c.z < zbuf[pix] {
            zbuf[pix] = c.z;
            owner[pix] = idx;
        }
    }
    let mut rgb = vec![0.0f32; 3 * n];
    let mut mask = vec![false; n];
    for pix in 0..n {
        if owner[pix] != usize::MAX {
            let col = points.rgb[owner[pix]];
            for c in 0..3 {
                rgb[c * n + pix] = col[c];
            }
            mask[pix] = true;
        }
    }
    RenderedFrame {
        rgb,
        mask,
        height: out_h,
        width: out_w,
    }
}

/// Proxy video and its coverage mask (`frames × h' × w'`, 1 = covered).
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyVideo {
    pub rgb: Video,
    pub mask: Tensor<f32>,
}

impl ProxyVideo {
    pub fn coverage(&self) -> f64 {
        let m = self.mask.data();
        m.iter().map(|&v| v as f64).sum::<f64>() / m.len().max(1) as f64
    }
}

/// Renders source frame `i`'s point cloud from target pose `i`, directly at
/// `1/downsample` of the source resolution.
pub fn render_proxy_video(
    src_rgb: &Video,
    src_depth: &DepthVideo,
    src_traj: &Trajectory,
    tgt_traj: &Trajectory,
    downsample: usize,
) -> Result<ProxyVideo, RenderError> {
    let f = src_rgb.frames();
    if src_depth.frames() != f || src_traj.len() != f || tgt_traj.len() != f {
        return Err(RenderError::FrameCount {
            rgb: f,
            depth: src_depth.frames(),
            src: src_traj.len(),
            tgt: tgt_traj.len(),
        });
    }
    let (h, w) = (src_rgb.height(), src_rgb.width());
    if src_depth.height() != h || src_depth.width() != w {
        return Err(RenderError::Dimensions("depth and rgb sizes differ".into()));
    }
    if downsample == 0 || h % downsample != 0 || w % downsample != 0 {
        return Err(RenderError::Dimensions(format!(
            "downsample {downsample} does not divide {h}×{w}"
        )));
    }
    let (oh, ow) = (h / downsample, w / downsample);
    let mut rgb = Video::zeros(f, oh, ow);
    let mut mask = Tensor::<f32>::zeros([f, oh, ow]);
    for i in 0..f {
        let pts = lift_to_points(
            src_rgb.frame(i),
            src_depth.frame(i),
            &src_traj.poses[i],
            &src_traj.intrinsics,
        )?;
        let frame = splat_render(&pts, &tgt_traj.poses[i], &tgt_traj.intrinsics, oh, ow);
        rgb.frame_mut(i).copy_from_slice(&frame.rgb);
        for (m, &b) in mask.data_mut()[i * oh * ow..(i + 1) * oh * ow]
            .iter_mut()
            .zip(&frame.mask)
        {
            *m = if b { 1.0 } else { 0.0 };
        }
    }
    Ok(ProxyVideo { rgb, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn intr() -> Intrinsics {
        Intrinsics::new(8.0, 8.0, 4.0, 3.0, 9, 7).unwrap()
    }

    #[test]
    fn principal_point_lifts_onto_axis() {
        let k = intr();
        let mut depth = vec![0.0f32; 63];
        depth[3 * 9 + 4] = 2.5;
        let rgb = vec![0.5f32; 3 * 63];
        let pts = lift_to_points(&rgb, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts.xyz[0], Vector3::new(0.0, 0.0, 2.5));
        let none = lift_to_points(&rgb, &vec![0.0; 63], &Pose::identity(), &k).unwrap();
        assert!(none.is_empty());
        assert!(lift_to_points(&rgb, &depth[..10], &Pose::identity(), &k).is_err());
    }

    #[test]
    fn splat_rules() {
        let k = intr();
        let empty = splat_render(&PointSet::default(), &Pose::identity(), &k, 7, 9);
        assert!(empty.mask.iter().all(|m| !m) && empty.rgb.iter().all(|&v| v == 0.0));

        let one = PointSet {
            xyz: vec![Vector3::new(0.0, 0.0, 2.0)],
            rgb: vec![[0.1, 0.2, 0.3]],
        };
        let r = splat_render(&one, &Pose::identity(), &k, 7, 9);
        let pix = 3 * 9 + 4;
        assert_eq!(r.mask.iter().filter(|&&m| m).count(), 1);
        assert!(r.mask[pix]);
        assert_eq!([r.rgb[pix], r.rgb[63 + pix], r.rgb[126 + pix]], [0.1, 0.2, 0.3]);

        let two = PointSet {
            xyz: vec![Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, 0.0, 1.0)],
            rgb: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        let r = splat_render(&two, &Pose::identity(), &k, 7, 9);
        assert_eq!([r.rgb[pix], r.rgb[63 + pix]], [0.0, 1.0]);

        let tie = PointSet {
            xyz: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0)],
            rgb: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        let r = splat_render(&tie, &Pose::identity(), &k, 7, 9);
        assert_eq!(r.rgb[pix], 1.0);

        let behind = PointSet {
            xyz: vec![Vector3::new(0.0, 0.0, -1.0)],
            rgb: vec![[1.0, 1.0, 1.0]],
        };
        assert_eq!(splat_render(&behind, &Pose::identity(), &k, 7, 9).coverage(), 0.0);
    }

    fn toy_rgbd(f: usize, h: usize, w: usize) -> (Video, DepthVideo) {
        let mut rgb = Video::zeros(f, h, w);
        let mut depth = Tensor::<f32>::zeros([f, h, w]);
        for i in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let c = [(x as f32) / w as f32, (y as f32) / h as f32, (i as f32 + 1.0) / f as f32];
                    rgb.set_pixel(i, y, x, c);
                    depth.data_mut()[(i * h + y) * w + x] = 2.0 + 0.1 * ((x * 7 + y * 3 + i) % 5) as f32;
                }
            }
        }
        (rgb, DepthVideo(depth))
    }

    #[test]
    fn same_pose_round_trip_is_exact() {
        let k = Intrinsics::default_for(16, 12);
        let (rgb, depth) = toy_rgbd(3, 12, 16);
        let traj = Trajectory::new(
            vec![
                Pose::identity(),
                Pose::from_translation(Vector3::new(0.3, -0.1, 0.2)),
                Pose::from_rotation(Rotation3::from_euler_angles(0.1, -0.2, 0.05)),
            ],
            k,
        )
        .unwrap();
        let proxy = render_proxy_video(&rgb, &depth, &traj, &traj, 1).unwrap();
        assert_eq!(proxy.coverage(), 1.0);
        assert_eq!(proxy.rgb, rgb);
    }

    #[test]
    fn facing_away_covers_nothing() {
        let k = Intrinsics::default_for(16, 12);
        let (rgb, depth) = toy_rgbd(2, 12, 16);
        let src = Trajectory::static_camera(2, k);
        let away = Pose::from_rotation(Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI));
        let tgt = Trajectory::new(vec![away; 2], k).unwrap();
        let proxy = render_proxy_video(&rgb, &depth, &src, &tgt, 1).unwrap();
        assert_eq!(proxy.coverage(), 0.0);
        assert!(proxy.rgb.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsampled_shape_and_errors() {
        let k = Intrinsics::default_for(64, 64);
        let (rgb, depth) = toy_rgbd(2, 64, 64);
        let src = Trajectory::static_camera(2, k);
        let proxy = render_proxy_video(&rgb, &depth, &src, &src, 4).unwrap();
        assert_eq!(proxy.rgb.0.shape(), &[2, 3, 16, 16]);
        assert_eq!(proxy.mask.shape(), &[2, 16, 16]);
        let short = Trajectory::static_camera(1, k);
        assert!(matches!(
            render_proxy_video(&rgb, &depth, &src, &short, 4),
            Err(RenderError::FrameCount { .. })
        ));
        assert!(render_proxy_video(&rgb, &depth, &src, &src, 3).is_err());
    }
}
