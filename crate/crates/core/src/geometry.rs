//! Rigid camera poses, basic trajectories, Plücker ray fields and the
//! rotation/translation trajectory-error metrics.
//!
//! Poses are camera-to-world. The camera frame is x right, y down, z forward;
//! pixel `(u, v)` has its center at integer coordinates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Distance of the arc-trajectory pivot in front of the first camera.
pub const ARC_PIVOT_DEPTH: f64 = 4.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectory needs at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("unknown trajectory kind `{0}`")]
    UnknownKind(String),
    #[error("trajectory file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, focal length equal to the image width (about 53° field
    /// of view), principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Intrinsics of the same camera at `1/factor` resolution.
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Pixel coordinates of a camera-frame point (no depth check).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let p = Self {
            rotation,
            translation,
        };
        if !p.is_valid(1e-9) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal with det +1: {rotation:?}"
            )));
        }
        Ok(p)
    }

    pub fn from_rotation(r: Rotation3<f64>) -> Self {
        Self {
            rotation: *r.matrix(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        orth && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: orthonormalize(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `[R | t]` flattened row by row: 12 numbers.
    pub fn extrinsic_row12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    /// Twist `(ω, u)` with `exp(ω, u) = self`.
    pub fn log(&self) -> (Vector3<f64>, Vector3<f64>) {
        let omega = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        let u = v_inverse(&omega) * self.translation;
        (omega, u)
    }

    pub fn exp(omega: &Vector3<f64>, u: &Vector3<f64>) -> Pose {
        Pose {
            rotation: *Rotation3::from_scaled_axis(*omega).matrix(),
            translation: v_matrix(omega) * u,
        }
    }

    /// Constant-velocity screw motion from identity: `exp(s · log(self))`.
    pub fn screw_fraction(&self, s: f64) -> Pose {
        let (omega, u) = self.log();
        Pose::exp(&(omega * s), &(u * s))
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn v_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    let k = skew(w);
    let (a, b) = if th < 1e-6 {
        (0.5 - th * th / 24.0, 1.0 / 6.0 - th * th / 120.0)
    } else {
        ((1.0 - th.cos()) / (th * th), (th - th.sin()) / (th * th * th))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn v_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    let k = skew(w);
    let c = if th < 1e-6 {
        1.0 / 12.0 + th * th / 720.0
    } else {
        (1.0 - th * th.sin() / (2.0 * (1.0 - th.cos()))) / (th * th)
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Nearest rotation matrix (polar factor with positive determinant).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Geodesic angle between two rotations, in radians.
///
/// Uses `atan2(|skew|, trace)` of `AᵀB`, which equals
/// `arccos((trace − 1) / 2)` but stays accurate near zero.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let sx = m[(2, 1)] - m[(1, 2)];
    let sy = m[(0, 2)] - m[(2, 0)];
    let sz = m[(1, 0)] - m[(0, 1)];
    let s = 0.5 * (sx * sx + sy * sy + sz * sz).sqrt();
    let c = 0.5 * (m.trace() - 1.0);
    s.atan2(c.clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, intrinsics: Intrinsics) -> Result<Self, GeometryError> {
        if poses.is_empty() {
            return Err(GeometryError::TooShort { needed: 1, got: 0 });
        }
        if let Some((i, _)) = poses.iter().enumerate().find(|(_, p)| !p.is_valid(1e-9)) {
            return Err(GeometryError::InvalidPose(format!("frame {i}")));
        }
        intrinsics.validate()?;
        Ok(Self { poses, intrinsics })
    }

    pub fn static_camera(n_frames: usize, intrinsics: Intrinsics) -> Self {
        Self {
            poses: vec![Pose::identity(); n_frames],
            intrinsics,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Re-expresses every pose relative to the first: frame 0 becomes identity.
    pub fn normalize_to_first(&self) -> Trajectory {
        let inv0 = self.poses[0].inverse();
        Trajectory {
            poses: self.poses.iter().map(|p| inv0.compose(p)).collect(),
            intrinsics: self.intrinsics,
        }
    }

    /// Subsequence of frames, in the given order.
    pub fn select(&self, frames: &[usize]) -> Trajectory {
        Trajectory {
            poses: frames.iter().map(|&i| self.poses[i]).collect(),
            intrinsics: self.intrinsics,
        }
    }

    /// `frames × 12` row-major `[R|t]` rows.
    pub fn extrinsic_rows(&self) -> Vec<f64> {
        self.poses.iter().flat_map(|p| p.extrinsic_row12()).collect()
    }

    pub fn to_json(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::from("{\n  \"intrinsics\": {");
        s += &format!(
            "\"fx\": {}, \"fy\": {}, \"cx\": {}, \"cy\": {}, \"width\": {}, \"height\": {}}},\n",
            fmt17(k.fx),
            fmt17(k.fy),
            fmt17(k.cx),
            fmt17(k.cy),
            k.width,
            k.height
        );
        s += "  \"frames\": [\n";
        for (i, p) in self.poses.iter().enumerate() {
            let r: Vec<String> = (0..3)
                .flat_map(|row| (0..3).map(move |col| (row, col)))
                .map(|(row, col)| fmt17(p.rotation[(row, col)]))
                .collect();
            let t: Vec<String> = p.translation.iter().map(|&v| fmt17(v)).collect();
            s += &format!("    {{\"R\": [{}], \"t\": [{}]}}", r.join(", "), t.join(", "));
            s += if i + 1 < self.poses.len() { ",\n" } else { "\n" };
        }
        s += "  ]\n}\n";
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let raw: TrajectoryJson = serde_json::from_str(text).map_err(|e| GeometryError::File {
            path: "<string>".into(),
            msg: e.to_string(),
        })?;
        let poses = raw
            .frames
            .iter()
            .map(|f| Pose {
                rotation: Matrix3::from_row_slice(&f.r),
                translation: Vector3::from_column_slice(&f.t),
            })
            .collect();
        Trajectory::new(poses, raw.intrinsics)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json()).map_err(|e| GeometryError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            GeometryError::File { msg, .. } => GeometryError::File {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}

#[derive(Deserialize)]
struct TrajectoryJson {
    intrinsics: Intrinsics,
    frames: Vec<FrameJson>,
}

#[derive(Deserialize)]
struct FrameJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

/// Scientific notation with 17 significant digits (round-trips any f64).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    PanLeft,
    PanRight,
    TiltUp,
    TiltDown,
    ZoomIn,
    ZoomOut,
    TruckLeft,
    TruckRight,
    PedestalUp,
    ArcRight,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 10] = [
        TrajectoryKind::PanLeft,
        TrajectoryKind::PanRight,
        TrajectoryKind::TiltUp,
        TrajectoryKind::TiltDown,
        TrajectoryKind::ZoomIn,
        TrajectoryKind::ZoomOut,
        TrajectoryKind::TruckLeft,
        TrajectoryKind::TruckRight,
        TrajectoryKind::PedestalUp,
        TrajectoryKind::ArcRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::PanLeft => "pan-left",
            TrajectoryKind::PanRight => "pan-right",
            TrajectoryKind::TiltUp => "tilt-up",
            TrajectoryKind::TiltDown => "tilt-down",
            TrajectoryKind::ZoomIn => "zoom-in",
            TrajectoryKind::ZoomOut => "zoom-out",
            TrajectoryKind::TruckLeft => "truck-left",
            TrajectoryKind::TruckRight => "truck-right",
            TrajectoryKind::PedestalUp => "pedestal-up",
            TrajectoryKind::ArcRight => "arc-right",
        }
    }

    /// Whether the magnitude is an angle (radians) rather than a distance.
    pub fn is_rotational(self) -> bool {
        matches!(
            self,
            TrajectoryKind::PanLeft
                | TrajectoryKind::PanRight
                | TrajectoryKind::TiltUp
                | TrajectoryKind::TiltDown
                | TrajectoryKind::ArcRight
        )
    }

    /// Pose reached at the end of the trajectory.
    pub fn terminal_pose(self, magnitude: f64) -> Pose {
        let m = magnitude;
        let rot = |axis: Vector3<f64>, angle: f64| {
            Pose::from_rotation(Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle))
        };
        match self {
            // Positive rotation about +y turns the optical axis toward +x.
            TrajectoryKind::PanRight => rot(Vector3::y(), m),
            TrajectoryKind::PanLeft => rot(Vector3::y(), -m),
            // Positive rotation about +x turns the optical axis toward −y (up).
            TrajectoryKind::TiltUp => rot(Vector3::x(), m),
            TrajectoryKind::TiltDown => rot(Vector3::x(), -m),
            TrajectoryKind::ZoomIn => Pose::from_translation(Vector3::new(0.0, 0.0, m)),
            TrajectoryKind::ZoomOut => Pose::from_translation(Vector3::new(0.0, 0.0, -m)),
            TrajectoryKind::TruckRight => Pose::from_translation(Vector3::new(m, 0.0, 0.0)),
            TrajectoryKind::TruckLeft => Pose::from_translation(Vector3::new(-m, 0.0, 0.0)),
            TrajectoryKind::PedestalUp => Pose::from_translation(Vector3::new(0.0, -m, 0.0)),
            TrajectoryKind::ArcRight => {
                let r = *Rotation3::from_axis_angle(&Vector3::y_axis(), -m).matrix();
                let pivot = Vector3::new(0.0, 0.0, ARC_PIVOT_DEPTH);
                Pose {
                    rotation: r,
                    translation: pivot - r * pivot,
                }
            }
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrajectoryKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::UnknownKind(s.to_string()))
    }
}

/// Screw-interpolated trajectory from identity to the kind's terminal pose.
pub fn make_basic_trajectory(
    kind: TrajectoryKind,
    magnitude: f64,
    n_frames: usize,
    intrinsics: Intrinsics,
) -> Result<Trajectory, GeometryError> {
    if n_frames < 2 {
        return Err(GeometryError::TooShort {
            needed: 2,
            got: n_frames,
        });
    }
    let terminal = kind.terminal_pose(magnitude);
    let poses = (0..n_frames)
        .map(|i| {
            if i == 0 {
                Pose::identity()
            } else if i == n_frames - 1 {
                terminal
            } else {
                terminal.screw_fraction(i as f64 / (n_frames - 1) as f64)
            }
        })
        .collect();
    Trajectory::new(poses, intrinsics)
}

/// Per-pixel world-space Plücker coordinates, shape `6 × height × width`,
/// channels `(d, o × d)` with `d` the unit ray direction and `o` the center.
pub fn plucker_field(pose: &Pose, intr: &Intrinsics) -> Tensor<f64> {
    let (h, w) = (intr.height, intr.width);
    let mut data = vec![0.0; 6 * h * w];
    let o = pose.center();
    for v in 0..h {
        for u in 0..w {
            let d = (pose.rotation * intr.ray(u as f64, v as f64)).normalize();
            let m = o.cross(&d);
            let idx = v * w + u;
            for c in 0..3 {
                data[c * h * w + idx] = d[c];
                data[(3 + c) * h * w + idx] = m[c];
            }
        }
    }
    Tensor::new([6, h, w], data).expect("sized above")
}

fn check_lengths(gt: &Trajectory, est: &Trajectory) -> Result<(), GeometryError> {
    if gt.len() != est.len() {
        return Err(GeometryError::LengthMismatch(gt.len(), est.len()));
    }
    if gt.is_empty() {
        return Err(GeometryError::TooShort { needed: 1, got: 0 });
    }
    Ok(())
}

/// Mean per-frame geodesic rotation error, radians.
pub fn rot_err(gt: &Trajectory, est: &Trajectory) -> Result<f64, GeometryError> {
    check_lengths(gt, est)?;
    let total: f64 = gt
        .poses
        .iter()
        .zip(&est.poses)
        .map(|(a, b)| rotation_angle_between(&a.rotation, &b.rotation))
        .sum();
    Ok(total / gt.len() as f64)
}

/// Least-squares scale aligning estimated translations to ground truth
/// (1 when every estimated translation is zero).
pub fn alignment_scale(gt: &Trajectory, est: &Trajectory) -> f64 {
    let num: f64 = gt
        .poses
        .iter()
        .zip(&est.poses)
        .map(|(a, b)| a.translation.dot(&b.translation))
        .sum();
    let den: f64 = est.poses.iter().map(|b| b.translation.norm_squared()).sum();
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Mean Euclidean translation error after least-squares scale alignment.
pub fn trans_err(gt: &Trajectory, est: &Trajectory) -> Result<f64, GeometryError> {
    check_lengths(gt, est)?;
    let s = alignment_scale(gt, est);
    let total: f64 = gt
        .poses
        .iter()
        .zip(&est.poses)
        .map(|(a, b)| (a.translation - b.translation * s).norm())
        .sum();
    Ok(total / gt.len() as f64)
}
