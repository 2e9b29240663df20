//! Camera trajectory recovery from rendered or generated frames: colour
//! segmentation of the fiducial markers, then perspective-n-point per frame.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{orthonormalize, Intrinsics, Pose, Trajectory};
use crate::scenegen::SceneSpec;
use crate::video::Video;

/// Maximal RGB distance from a marker's colour for a pixel to belong to it.
pub const COLOR_THRESHOLD: f32 = 0.15;
pub const MIN_PIXELS: usize = 3;
pub const MIN_CORRESPONDENCES: usize = 4;
const GN_STEPS: usize = 20;
const MULTI_START_STEPS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no confident frames: fewer than {MIN_CORRESPONDENCES} markers found in every frame")]
    NoConfidentFrames,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkerHit {
    /// Sub-pixel `(u, v)` centroid.
    pub centroid: (f64, f64),
    pub pixels: usize,
    pub found: bool,
}

/// One entry per scene fiducial, in scene order.
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialDetection {
    pub markers: Vec<MarkerHit>,
}

impl FiducialDetection {
    pub fn found_count(&self) -> usize {
        self.markers.iter().filter(|m| m.found).count()
    }
}

/// Segments each fiducial colour in a planar `3 × h × w` frame, keeps the
/// largest 8-connected blob and returns its intensity-weighted centroid.
/// Markers cut by the image border are reported as not found, since their
/// centroid would be biased.
pub fn detect_fiducials(frame: &[f32], h: usize, w: usize, scene: &SceneSpec) -> FiducialDetection {
    let n = h * w;
    let markers = scene
        .fiducials
        .iter()
        .map(|fid| {
            let blob = largest_component(&color_mask(frame, h, w, fid.color), h, w);
            let (mut su, mut sv, mut sw) = (0.0f64, 0.0f64, 0.0f64);
            let mut touches_border = false;
            for &i in &blob {
                let (u, v) = (i % w, i / w);
                let weight = (frame[i] + frame[n + i] + frame[2 * n + i]) as f64 / 3.0;
                su += weight * u as f64;
                sv += weight * v as f64;
                sw += weight;
                touches_border |= u == 0 || v == 0 || u + 1 == w || v + 1 == h;
            }
            let found = blob.len() >= MIN_PIXELS && sw > 0.0 && !touches_border;
            MarkerHit {
                centroid: if sw > 0.0 { (su / sw, sv / sw) } else { (f64::NAN, f64::NAN) },
                pixels: blob.len(),
                found,
            }
        })
        .collect();
    FiducialDetection { markers }
}

/// Pixel indices of the largest 8-connected set region; ties go to the
/// region found first in raster order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            region.push(i);
            let (u, v) = ((i % w) as isize, (i / w) as isize);
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (u2, v2) = (u + du, v + dv);
                    if u2 < 0 || v2 < 0 || u2 >= w as isize || v2 >= h as isize {
                        continue;
                    }
                    let j = v2 as usize * w + u2 as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if region.len() > best.len() {
            best = region;
        }
    }
    best.sort_unstable();
    best
}

/// World-to-camera rotation and translation.
#[derive(Clone, Copy, Debug)]
struct Extrinsic {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Extrinsic {
    fn to_pose(self) -> Pose {
        // camera-to-world is the inverse of world-to-camera
        let rt = self.r.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.t),
        }
    }

    fn from_pose(p: &Pose) -> Self {
        let r = p.rotation.transpose();
        Self {
            r,
            t: -(r * p.translation),
        }
    }
}

fn normalized(intr: &Intrinsics, (u, v): (f64, f64)) -> Vector2<f64> {
    Vector2::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy)
}

/// Rejects point sets that do not span three dimensions.
fn check_spread(world: &[Vector3<f64>]) -> Result<(), PoseError> {
    let n = world.len() as f64;
    let mean = world.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= 1e-10 * hi {
        return Err(PoseError::Degenerate("points are coplanar or collinear".into()));
    }
    Ok(())
}

/// Direct linear transform of the normalized projection matrix (≥ 6 points).
fn dlt(world: &[Vector3<f64>], img: &[Vector2<f64>]) -> Result<Extrinsic, PoseError> {
    let n = world.len();
    let mean = world.iter().sum::<Vector3<f64>>() / n as f64;
    let scale = (world.iter().map(|p| (p - mean).norm()).sum::<f64>() / n as f64).max(1e-12);
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, x)) in world.iter().zip(img).enumerate() {
        let q = (p - mean) / scale;
        let hom = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = hom[j];
            a[(2 * i, 8 + j)] = -x.x * hom[j];
            a[(2 * i + 1, 4 + j)] = hom[j];
            a[(2 * i + 1, 8 + j)] = -x.y * hom[j];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (l0, l1, lmax) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[11]],
    );
    if l1 <= 1e-12 * lmax || l0 > 0.5 * l1 && l1 <= 1e-9 * lmax {
        return Err(PoseError::Degenerate("rank-deficient linear system".into()));
    }
    let p = eig.eigenvectors.column(order[0]);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut tn = Vector3::new(p[3], p[7], p[11]);
    let svd = m.svd(false, false);
    let s = svd.singular_values.mean();
    if s <= 0.0 {
        return Err(PoseError::Degenerate("zero projection matrix".into()));
    }
    m /= s;
    tn /= s;
    // The centroid of the points must end up in front of the camera.
    if tn.z < 0.0 {
        m = -m;
        tn = -tn;
    }
    let r = orthonormalize(&m);
    // m acts on (p - mean) / scale: undo the normalization.
    let t = tn - r * mean / scale;
    Ok(Extrinsic { r, t: t * scale })
}

/// Starting poses for small point sets: a fan of rotations, each with the
/// translation that puts the point centroid on the observed centroid ray at
/// the depth implied by the image spread.
fn initial_guesses(world: &[Vector3<f64>], img: &[Vector2<f64>]) -> Vec<Extrinsic> {
    let n = world.len() as f64;
    let mean = world.iter().sum::<Vector3<f64>>() / n;
    let img_mean = img.iter().sum::<Vector2<f64>>() / n;
    let world_spread = world.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let img_spread = img.iter().map(|x| (x - img_mean).norm()).sum::<f64>() / n;
    let depth = if img_spread > 0.0 { world_spread / img_spread } else { 1.0 };
    let ray = Vector3::new(img_mean.x, img_mean.y, 1.0) * depth;
    let mut out = Vec::new();
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        for angle in [-0.9, -0.45, 0.0, 0.45, 0.9] {
            if angle == 0.0 && axis != Vector3::x() {
                continue;
            }
            let r = Rotation3::from_scaled_axis(axis * angle).into_inner();
            out.push(Extrinsic { r, t: ray - r * mean });
        }
    }
    out
}

/// Sum of squared pixel reprojection errors for `project(ext, point)`.
fn cost(ext: &Extrinsic, world: &[Vector3<f64>], obs: &[Vector2<f64>], intr: &Intrinsics) -> f64 {
    world
        .iter()
        .zip(obs)
        .map(|(p, o)| {
            let c = ext.r * p + ext.t;
            let dx = (c.x / c.z - o.x) * intr.fx;
            let dy = (c.y / c.z - o.y) * intr.fy;
            dx * dx + dy * dy
        })
        .sum()
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on pixel reprojection error,
/// with left-multiplied rotation updates.
fn refine(mut ext: Extrinsic, world: &[Vector3<f64>], obs: &[Vector2<f64>], intr: &Intrinsics, max_steps: usize) -> Extrinsic {
    let mut current = cost(&ext, world, obs, intr);
    let mut lambda = 1e-6;
    let mut steps = 0;
    while steps < max_steps && current > 0.0 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, o) in world.iter().zip(obs) {
            let c = ext.r * p + ext.t;
            let iz = 1.0 / c.z;
            let proj = nalgebra::Matrix2x3::new(
                intr.fx * iz,
                0.0,
                -intr.fx * c.x * iz * iz,
                0.0,
                intr.fy * iz,
                -intr.fy * c.y * iz * iz,
            );
            // d(c)/d(omega) = -[c]x, d(c)/d(v) = I
            let skew = Matrix3::new(0.0, -c.z, c.y, c.z, 0.0, -c.x, -c.y, c.x, 0.0);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(proj * (-skew)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&proj);
            let r = Vector2::new((c.x * iz - o.x) * intr.fx, (c.y * iz - o.y) * intr.fy);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        while steps < max_steps {
            steps += 1;
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(d) = damped.cholesky().map(|ch| -ch.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let rot = Rotation3::from_scaled_axis(Vector3::new(d[0], d[1], d[2])).into_inner();
            let cand = Extrinsic {
                r: orthonormalize(&(rot * ext.r)),
                t: rot * ext.t + Vector3::new(d[3], d[4], d[5]),
            };
            let c = cost(&cand, world, obs, intr);
            if c.is_finite() && c < current {
                improved = current - c > 1e-14 * current;
                ext = cand;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e8 {
                return ext;
            }
        }
        if !improved {
            break;
        }
    }
    ext
}

/// Camera pose from 3D–2D correspondences and known intrinsics: linear
/// initialization by DLT with ≥ 6 points (multi-start with 4–5), then
/// Gauss-Newton.
pub fn pnp_dlt(world: &[Vector3<f64>], pixels: &[(f64, f64)], intr: &Intrinsics) -> Result<Pose, PoseError> {
    pnp_with_init(world, pixels, intr, None)
}

fn pnp_with_init(
    world: &[Vector3<f64>],
    pixels: &[(f64, f64)],
    intr: &Intrinsics,
    init: Option<&Pose>,
) -> Result<Pose, PoseError> {
    if world.len() != pixels.len() || world.len() < MIN_CORRESPONDENCES {
        return Err(PoseError::TooFew {
            needed: MIN_CORRESPONDENCES,
            got: world.len().min(pixels.len()),
        });
    }
    check_spread(world)?;
    let img: Vec<Vector2<f64>> = pixels.iter().map(|&p| normalized(intr, p)).collect();
    let linear = if world.len() >= 6 {
        dlt(world, &img)
    } else {
        Err(PoseError::TooFew { needed: 6, got: world.len() })
    };
    let mut candidates = Vec::new();
    match &linear {
        Ok(e) => candidates.push(refine(*e, world, &img, intr, GN_STEPS)),
        Err(_) => candidates.extend(initial_guesses(world, &img).into_iter().map(|e| refine(e, world, &img, intr, MULTI_START_STEPS))),
    }
    if let Some(p) = init {
        candidates.push(refine(Extrinsic::from_pose(p), world, &img, intr, GN_STEPS));
    }
    let best = candidates
        .into_iter()
        .filter(|e| world.iter().all(|p| (e.r * p + e.t).z > 0.0))
        .min_by(|a, b| cost(a, world, &img, intr).total_cmp(&cost(b, world, &img, intr)));
    match (best, linear) {
        (Some(e), _) => Ok(e.to_pose()),
        (None, Err(err)) => Err(err),
        (None, Ok(_)) => Err(PoseError::Degenerate("no solution with points in front of the camera".into())),
    }
}

/// Normalized-image offset between the centroid of a sphere's silhouette
/// (an ellipse) and the projection of its center, for a camera-frame center.
fn silhouette_offset(c: &Vector3<f64>, radius: f64) -> Vector2<f64> {
    let denom = c.z * c.z - radius * radius;
    let centroid = Vector2::new(c.x * c.z / denom, c.y * c.z / denom);
    centroid - Vector2::new(c.x / c.z, c.y / c.z)
}

fn color_mask(frame: &[f32], h: usize, w: usize, color: [f32; 3]) -> Vec<bool> {
    let n = h * w;
    (0..n)
        .map(|i| {
            let d2: f32 = (0..3).map(|c| (frame[c * n + i] - color[c]).powi(2)).sum();
            d2.sqrt() < COLOR_THRESHOLD
        })
        .collect()
}

/// Pixels of one marker's silhouette neighbourhood, for pose refinement.
///
/// Returns edge midpoints (between 4-adjacent pixels with exactly one inside
/// the marker's colour class) and labelled pixels (+1 inside, −1 outside)
/// within `band` pixels of the marker's bounding box. Pixels belonging to
/// another marker are skipped: an edge against another marker is an
/// occlusion, not the silhouette.
fn silhouette_pixels(mask: &[bool], others: &[bool], h: usize, w: usize, band: usize) -> (Vec<(f64, f64)>, Vec<(f64, f64, f64)>) {
    let (mut u0, mut v0, mut u1, mut v1) = (w, h, 0, 0);
    for v in 0..h {
        for u in 0..w {
            if mask[v * w + u] {
                (u0, v0, u1, v1) = (u0.min(u), v0.min(v), u1.max(u), v1.max(v));
            }
        }
    }
    let mut edges = Vec::new();
    let mut labelled = Vec::new();
    if u0 > u1 {
        return (edges, labelled);
    }
    let (ua, va) = (u0.saturating_sub(band), v0.saturating_sub(band));
    let (ub, vb) = ((u1 + band).min(w - 1), (v1 + band).min(h - 1));
    for v in va..=vb {
        for u in ua..=ub {
            let i = v * w + u;
            if others[i] {
                continue;
            }
            labelled.push((u as f64, v as f64, if mask[i] { 1.0 } else { -1.0 }));
            for (du, dv) in [(1usize, 0usize), (0, 1)] {
                let (u2, v2) = (u + du, v + dv);
                if u2 > ub || v2 > vb {
                    continue;
                }
                let j = v2 * w + u2;
                if mask[i] != mask[j] && !others[j] {
                    edges.push(((u + u2) as f64 / 2.0, (v + v2) as f64 / 2.0));
                }
            }
        }
    }
    (edges, labelled)
}

/// Pose refinement against marker silhouettes. A sample is a viewing ray
/// tagged with its marker; its signed distance is how far, in pixels, the
/// ray passes inside the marker's silhouette (negative outside).
struct SilhouetteFit<'a> {
    centers: Vec<Vector3<f64>>,
    radii: Vec<f64>,
    intr: &'a Intrinsics,
}

struct RaySample {
    marker: usize,
    dir: Vector3<f64>,
    /// 0 for edge samples, ±1 for inside/outside pixels.
    label: f64,
}

impl SilhouetteFit<'_> {
    fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.intr.cx) / self.intr.fx, (v - self.intr.cy) / self.intr.fy, 1.0).normalize()
    }

    fn signed(&self, ext: &Extrinsic, samples: &[RaySample]) -> Vec<f64> {
        let cam: Vec<Vector3<f64>> = self.centers.iter().map(|c| ext.r * c + ext.t).collect();
        samples
            .iter()
            .map(|s| {
                let c = cam[s.marker];
                (self.radii[s.marker] - c.cross(&s.dir).norm()) / c.dot(&s.dir) * self.intr.fx
            })
            .collect()
    }

    fn jacobian(&self, ext: &Extrinsic, samples: &[RaySample]) -> DMatrix<f64> {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(samples.len(), 6);
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = self.signed(&perturbed(ext, &d), samples);
            d[k] = -h;
            let minus = self.signed(&perturbed(ext, &d), samples);
            for (row, (p, m)) in plus.iter().zip(&minus).enumerate() {
                jac[(row, k)] = (p - m) / (2.0 * h);
            }
        }
        jac
    }

    /// Damped Newton on `Σ loss(sᵢ, labelᵢ)`, where `loss` returns the value
    /// and its first two derivatives in `s`.
    fn minimize(
        &self,
        mut ext: Extrinsic,
        samples: &[RaySample],
        max_steps: usize,
        loss: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Extrinsic {
        let total = |s: &[f64]| -> f64 { s.iter().zip(samples).map(|(&v, x)| loss(v, x.label).0).sum() };
        let mut current = total(&self.signed(&ext, samples));
        let mut lambda = 1e-4;
        for _ in 0..max_steps {
            let sv = self.signed(&ext, samples);
            let jac = self.jacobian(&ext, samples);
            let mut grad = Vector6::<f64>::zeros();
            let mut hess = Matrix6::<f64>::zeros();
            for (row, (&v, x)) in sv.iter().zip(samples).enumerate() {
                let (_, d1, d2) = loss(v, x.label);
                let j: Vector6<f64> = jac.row(row).transpose().fixed_view::<6, 1>(0, 0).into();
                grad += j * d1;
                hess += j * j.transpose() * d2;
            }
            let mut accepted = false;
            while lambda < 1e10 {
                let mut damped = hess;
                for i in 0..6 {
                    damped[(i, i)] += lambda * hess[(i, i)].max(1e-9);
                }
                if let Some(step) = damped.cholesky().map(|ch| -ch.solve(&grad)) {
                    let cand = perturbed(&ext, &step);
                    let c = total(&self.signed(&cand, samples));
                    if c.is_finite() && c < current {
                        accepted = current - c > 1e-13 * current.abs().max(1e-300);
                        ext = cand;
                        current = c;
                        lambda = (lambda / 10.0).max(1e-12);
                        break;
                    }
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        ext
    }
}

fn perturbed(ext: &Extrinsic, d: &Vector6<f64>) -> Extrinsic {
    let rot = Rotation3::from_scaled_axis(Vector3::new(d[0], d[1], d[2])).into_inner();
    Extrinsic {
        r: orthonormalize(&(rot * ext.r)),
        t: rot * ext.t + Vector3::new(d[3], d[4], d[5]),
    }
}

/// Logistic loss `τ·softplus(−y·s/τ)` with derivatives in `s`.
fn logistic(s: f64, y: f64, tau: f64) -> (f64, f64, f64) {
    let z = -y * s / tau;
    let value = tau * if z > 30.0 { z } else { z.exp().ln_1p() };
    let sig = 1.0 / (1.0 + (-z).exp());
    (value, -y * sig, sig * (1.0 - sig) / tau)
}

/// Refines a frame's pose against the silhouettes of every found marker:
/// first least squares on edge midpoints, then an annealed logistic fit on
/// labelled pixels, which centers the pose within the set of poses that
/// reproduce the observed pixel classification.
fn refine_on_silhouettes(
    frame: &[f32],
    h: usize,
    w: usize,
    scene: &SceneSpec,
    det: &FiducialDetection,
    intr: &Intrinsics,
    start: &Pose,
) -> Pose {
    let masks: Vec<Vec<bool>> = scene
        .fiducials
        .iter()
        .map(|fid| color_mask(frame, h, w, fid.color))
        .collect();
    let mut any = vec![false; h * w];
    for m in &masks {
        for (a, &b) in any.iter_mut().zip(m) {
            *a |= b;
        }
    }
    let mut fit = SilhouetteFit {
        centers: Vec::new(),
        radii: Vec::new(),
        intr,
    };
    let mut edges = Vec::new();
    let mut labelled = Vec::new();
    for (i, fid) in scene.fiducials.iter().enumerate() {
        if !det.markers[i].found {
            continue;
        }
        let others: Vec<bool> = any.iter().zip(&masks[i]).map(|(&a, &own)| a && !own).collect();
        let marker = fit.centers.len();
        fit.centers.push(fid.center);
        fit.radii.push(fid.radius);
        let (e, l) = silhouette_pixels(&masks[i], &others, h, w, 2);
        edges.extend(e.into_iter().map(|(u, v)| RaySample {
            marker,
            dir: fit.ray(u, v),
            label: 0.0,
        }));
        labelled.extend(l.into_iter().map(|(u, v, y)| RaySample {
            marker,
            dir: fit.ray(u, v),
            label: y,
        }));
    }
    if edges.len() < 6 {
        return *start;
    }
    let mut ext = fit.minimize(Extrinsic::from_pose(start), &edges, GN_STEPS, |s, _| (s * s, 2.0 * s, 2.0));
    for tau in [0.3, 0.1, 0.03] {
        ext = fit.minimize(ext, &labelled, GN_STEPS, |s, y| logistic(s, y, tau));
    }
    ext.to_pose()
}

#[derive(Clone, Debug)]
pub struct TrajectoryEstimate {
    /// Normalized to the first confident frame; unconfident frames repeat
    /// the most recent confident pose (identity before the first).
    pub trajectory: Trajectory,
    pub confident: Vec<bool>,
    pub detections: Vec<FiducialDetection>,
}

impl TrajectoryEstimate {
    pub fn confident_frames(&self) -> Vec<usize> {
        (0..self.confident.len()).filter(|&i| self.confident[i]).collect()
    }

    /// RotErr and TransErr against `gt`, over confident frames only, both
    /// re-normalized to the first confident frame.
    pub fn errors(&self, gt: &Trajectory) -> Result<(f64, f64), crate::geometry::GeometryError> {
        let frames = self.confident_frames();
        let g = gt.select(&frames).normalize_to_first();
        let e = self.trajectory.select(&frames).normalize_to_first();
        Ok((crate::geometry::rot_err(&g, &e)?, crate::geometry::trans_err(&g, &e)?))
    }
}

/// Per-frame fiducial PnP over a video of `scene`.
pub fn estimate_trajectory(video: &Video, scene: &SceneSpec, intr: &Intrinsics) -> Result<TrajectoryEstimate, PoseError> {
    let (h, w) = (video.height(), video.width());
    let mut raw: Vec<Option<Pose>> = Vec::with_capacity(video.frames());
    let mut detections = Vec::with_capacity(video.frames());
    let mut prev: Option<Pose> = None;
    for f in 0..video.frames() {
        let det = detect_fiducials(video.frame(f), h, w, scene);
        let (world, radii, obs): (Vec<_>, Vec<_>, Vec<_>) = {
            let mut world = Vec::new();
            let mut radii = Vec::new();
            let mut obs = Vec::new();
            for (fid, m) in scene.fiducials.iter().zip(&det.markers) {
                if m.found {
                    world.push(fid.center);
                    radii.push(fid.radius);
                    obs.push(m.centroid);
                }
            }
            (world, radii, obs)
        };
        let mut pose = pnp_with_init(&world, &obs, intr, prev.as_ref()).ok();
        // Silhouette centroids sit slightly off the projected centers; move
        // the observations onto the centers under the current pose and refit.
        for _ in 0..3 {
            let Some(p) = pose else { break };
            let ext = Extrinsic::from_pose(&p);
            let corrected: Vec<(f64, f64)> = world
                .iter()
                .zip(&radii)
                .zip(&obs)
                .map(|((x, &r), &(u, v))| {
                    let off = silhouette_offset(&(ext.r * x + ext.t), r);
                    (u - off.x * intr.fx, v - off.y * intr.fy)
                })
                .collect();
            pose = pnp_with_init(&world, &corrected, intr, Some(&p)).ok().or(pose);
        }
        if let Some(p) = pose {
            pose = Some(refine_on_silhouettes(video.frame(f), h, w, scene, &det, intr, &p));
        }
        if pose.is_some() {
            prev = pose;
        }
        raw.push(pose);
        detections.push(det);
    }
    let first = raw.iter().position(Option::is_some).ok_or(PoseError::NoConfidentFrames)?;
    let inv0 = raw[first].expect("checked").inverse();
    let mut last = Pose::identity();
    let poses = raw
        .iter()
        .map(|p| {
            if let Some(p) = p {
                last = inv0.compose(p);
            }
            last
        })
        .collect();
    Ok(TrajectoryEstimate {
        trajectory: Trajectory {
            poses,
            intrinsics: *intr,
        },
        confident: raw.iter().map(Option::is_some).collect(),
        detections,
    })
}
