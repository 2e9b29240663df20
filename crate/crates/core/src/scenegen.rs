//! Procedural dynamic scenes with exact depth: moving spheres and boxes over a
//! checkerboard ground, plus a fixed constellation of emissive fiducial
//! spheres that make camera poses recoverable from rendered pixels.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{make_basic_trajectory, GeometryError, Intrinsics, Pose, Trajectory, TrajectoryKind};
use crate::renderer::{render_proxy_video, DepthVideo, ProxyVideo, RenderError};
use crate::tensor::ptv::{self, PtvError};
use crate::tensor::Tensor;
use crate::video::{Video, VideoError};

/// World `y` of the ground plane (`y` points down, so the ground is below).
pub const GROUND_Y: f64 = 2.0;
/// Rays travelling further than this along the optical axis see the sky.
pub const MAX_DEPTH: f64 = 40.0;
pub const SKY_COLOR: [f32; 3] = [0.55, 0.62, 0.72];
pub const FIDUCIAL_RADIUS: f64 = 0.13;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("trajectory has {traj} poses but {frames} frames were requested")]
    FrameCount { traj: usize, frames: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Ptv(#[from] PtvError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Box { half: Vector3<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// `base + velocity · frame`, with no motion along z.
    Linear { velocity: Vector3<f64> },
    /// `base + amplitude ⊙ sin(omega · frame + phase)`.
    Sinusoidal {
        amplitude: Vector3<f64>,
        omega: f64,
        phase: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub base: Vector3<f64>,
    pub color: [f32; 3],
    pub motion: Motion,
}

impl Primitive {
    pub fn center_at(&self, frame: usize) -> Vector3<f64> {
        let f = frame as f64;
        match self.motion {
            Motion::Linear { velocity } => self.base + velocity * f,
            Motion::Sinusoidal {
                amplitude,
                omega,
                phase,
            } => self.base + amplitude * (omega * f + phase).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fiducial {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ground {
    pub cell: f64,
    pub colors: [[f32; 3]; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub ground: Ground,
    pub fiducials: Vec<Fiducial>,
}

/// Eighteen fully saturated hues 20° apart plus white. Adjacent hues differ
/// by 1/3 in one channel; every hue has a channel at 0 and one at 1, which
/// keeps them well away from scene surfaces (channels within [0.19, 0.75]).
pub const FIDUCIAL_COLORS: [[f32; 3]; 19] = [
    [1.0, 0.0, 0.0],
    [1.0, 1.0 / 3.0, 0.0],
    [1.0, 2.0 / 3.0, 0.0],
    [1.0, 1.0, 0.0],
    [2.0 / 3.0, 1.0, 0.0],
    [1.0 / 3.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0 / 3.0],
    [0.0, 1.0, 2.0 / 3.0],
    [0.0, 1.0, 1.0],
    [0.0, 2.0 / 3.0, 1.0],
    [0.0, 1.0 / 3.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0 / 3.0, 0.0, 1.0],
    [2.0 / 3.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.0, 2.0 / 3.0],
    [1.0, 0.0, 1.0 / 3.0],
    [1.0, 1.0, 1.0],
];

/// Fiducial centers as (horizontal angle, vertical angle, depth): the point
/// sits at `depth · (tan h, tan v, 1)`. Found by a search that keeps at least
/// six markers fully inside a 64×64 view along every basic trajectory of
/// magnitude 0.5 while minimizing the predicted pose uncertainty; depths
/// spread from 1.05 to 3.15 decouple small rotations from translations.
const FIDUCIAL_LAYOUT: [(f64, f64, f64); 19] = [
    (-0.122, -0.376, 3.150),
    (0.332, -0.361, 1.096),
    (0.794, -0.705, 1.347),
    (0.119, -0.084, 1.359),
    (0.439, -0.621, 2.786),
    (0.341, 0.137, 3.150),
    (0.558, -0.040, 1.426),
    (-0.362, 0.361, 3.109),
    (-0.168, -0.018, 1.303),
    (0.402, 0.279, 3.150),
    (0.102, -0.346, 3.150),
    (-0.225, 0.344, 3.150),
    (-0.354, -0.503, 1.454),
    (-0.484, -0.709, 2.933),
    (0.234, 0.133, 3.150),
    (-0.198, -0.276, 3.136),
    (-0.603, -0.195, 1.059),
    (0.231, 0.332, 1.150),
    (-0.372, 0.175, 3.150),
];

pub fn canonical_fiducials() -> Vec<Fiducial> {
    FIDUCIAL_LAYOUT
        .iter()
        .zip(FIDUCIAL_COLORS)
        .map(|(&(h, v, z), color)| Fiducial {
            center: Vector3::new(z * h.tan(), z * v.tan(), z),
            radius: FIDUCIAL_RADIUS,
            color,
        })
        .collect()
}

/// SplitMix64 finalizer, used to derive independent seeds from a parent.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5CE7E));
    let n = rng.random_range(2..=5usize);
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere {
                radius: rng.random_range(0.3..0.6),
            }
        } else {
            Shape::Box {
                half: Vector3::new(
                    rng.random_range(0.25..0.55),
                    rng.random_range(0.25..0.55),
                    rng.random_range(0.25..0.55),
                ),
            }
        };
        let base = Vector3::new(
            rng.random_range(-1.8..1.8),
            rng.random_range(-0.9..1.0),
            rng.random_range(4.5..6.5),
        );
        let color = [
            rng.random_range(0.25f32..0.75),
            rng.random_range(0.25f32..0.75),
            rng.random_range(0.25f32..0.75),
        ];
        let motion = if rng.random_bool(0.5) {
            Motion::Linear {
                velocity: Vector3::new(rng.random_range(-0.04..0.04), rng.random_range(-0.02..0.02), 0.0),
            }
        } else {
            Motion::Sinusoidal {
                amplitude: Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.2..0.2),
                ),
                omega: rng.random_range(0.1..0.5),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        };
        primitives.push(Primitive {
            shape,
            base,
            color,
            motion,
        });
    }
    let g0 = rng.random_range(0.3f32..0.4);
    let g1 = rng.random_range(0.5f32..0.6);
    SceneSpec {
        seed,
        primitives,
        ground: Ground {
            cell: rng.random_range(0.5..1.0),
            colors: [[g0; 3], [g1; 3]],
        },
        fiducials: canonical_fiducials(),
    }
}

/// Brightness falloff applied to lit (non-emissive) surfaces.
pub fn attenuation(depth: f64) -> f32 {
    (1.0 / (1.0 + 0.04 * depth)) as f32
}

/// Ray parameter of the nearest hit in front of the origin, if any.
fn hit_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let disc = b * b - a * (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / a;
    if near > 1e-9 {
        return Some(near);
    }
    let far = (-b + sq) / a;
    (far > 1e-9).then_some(far)
}

fn hit_box(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        let lo = c[i] - half[i];
        let hi = c[i] + half[i];
        if d[i] == 0.0 {
            if o[i] < lo || o[i] > hi {
                return None;
            }
            continue;
        }
        let a = (lo - o[i]) / d[i];
        let b = (hi - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 {
        return None;
    }
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

/// Colour and camera-axis depth seen along `o + λ·d`, where `d` has unit
/// camera-z component so that `λ` is the depth. `None` depth means sky.
fn shade(scene: &SceneSpec, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> ([f32; 3], Option<f64>) {
    let mut best = MAX_DEPTH;
    let mut color = None;
    for fid in &scene.fiducials {
        if let Some(t) = hit_sphere(o, d, &fid.center, fid.radius) {
            if t < best {
                best = t;
                color = Some(fid.color);
            }
        }
    }
    for p in &scene.primitives {
        let c = p.center_at(frame);
        let hit = match p.shape {
            Shape::Sphere { radius } => hit_sphere(o, d, &c, radius),
            Shape::Box { half } => hit_box(o, d, &c, &half),
        };
        if let Some(t) = hit {
            if t < best {
                best = t;
                let a = attenuation(t);
                color = Some(p.color.map(|v| v * a));
            }
        }
    }
    if d.y > 0.0 {
        let t = (GROUND_Y - o.y) / d.y;
        if t > 1e-9 && t < best {
            best = t;
            let hit = o + d * t;
            let parity = ((hit.x / scene.ground.cell).floor() + (hit.z / scene.ground.cell).floor()) as i64;
            let a = attenuation(t);
            color = Some(scene.ground.colors[parity.rem_euclid(2) as usize].map(|v| v * a));
        }
    }
    match color {
        Some(c) => (c, Some(best)),
        None => (SKY_COLOR, None),
    }
}

/// Ray-casts every pixel center of every frame; sky pixels get depth 0.
pub fn raycast_render(scene: &SceneSpec, traj: &Trajectory, n_frames: usize) -> Result<(Video, DepthVideo), SceneError> {
    if traj.len() != n_frames {
        return Err(SceneError::FrameCount {
            traj: traj.len(),
            frames: n_frames,
        });
    }
    let k = &traj.intrinsics;
    let (h, w) = (k.height, k.width);
    let mut video = Video::zeros(n_frames, h, w);
    let mut depth = Tensor::<f32>::zeros([n_frames, h, w]);
    for f in 0..n_frames {
        let pose = &traj.poses[f];
        let o = pose.translation;
        for v in 0..h {
            for u in 0..w {
                let d = pose.rotation * k.ray(u as f64, v as f64);
                let (rgb, z) = shade(scene, f, &o, &d);
                video.set_pixel(f, v, u, rgb);
                depth.data_mut()[(f * h + v) * w + u] = z.map_or(0.0, |z| z as f32);
            }
        }
    }
    Ok((video, DepthVideo(depth)))
}

/// Motion of the source camera in generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMotion {
    #[default]
    Static,
    /// A slow pan of up to 0.1 rad in either direction.
    GentlePan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub trajs_per_scene: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default)]
    pub source_motion: SourceMotion,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            trajs_per_scene: 1,
            n_frames: 16,
            height: 64,
            width: 64,
            seed: 0,
            source_motion: SourceMotion::Static,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub scene_id: usize,
    pub sample_id: usize,
    pub scene_seed: u64,
    pub kind: TrajectoryKind,
    pub magnitude: f64,
    /// Paths relative to the manifest's directory.
    pub dir: String,
    pub src: String,
    pub tgt: String,
    pub src_depth: String,
    pub src_traj: String,
    pub tgt_traj: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub intrinsics: Intrinsics,
    pub samples: Vec<SampleEntry>,
}

/// Picks a trajectory kind and a magnitude from its family's range.
pub fn sample_target(rng: &mut impl Rng) -> (TrajectoryKind, f64) {
    let kind = TrajectoryKind::ALL[rng.random_range(0..TrajectoryKind::ALL.len())];
    let magnitude = if kind.is_rotational() {
        rng.random_range(0.15..0.5)
    } else {
        rng.random_range(0.2..0.6)
    };
    (kind, magnitude)
}

fn write_text(path: &Path, text: &str) -> Result<(), SceneError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Renders the whole dataset under `out_dir` and writes `manifest.json`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest, SceneError> {
    let intr = Intrinsics::default_for(cfg.width, cfg.height);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut samples = Vec::new();
    for scene_id in 0..cfg.n_scenes {
        let scene_seed = mix_seed(cfg.seed, scene_id as u64);
        let scene = generate_scene(scene_seed);
        for sample_id in 0..cfg.trajs_per_scene {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene_seed, 1 + sample_id as u64));
            let (kind, magnitude) = sample_target(&mut rng);
            let src_traj = match cfg.source_motion {
                SourceMotion::Static => Trajectory::static_camera(cfg.n_frames, intr),
                SourceMotion::GentlePan => {
                    let kind = if rng.random_bool(0.5) {
                        TrajectoryKind::PanLeft
                    } else {
                        TrajectoryKind::PanRight
                    };
                    make_basic_trajectory(kind, rng.random_range(0.0..0.1), cfg.n_frames, intr)?
                }
            };
            let tgt_traj = make_basic_trajectory(kind, magnitude, cfg.n_frames, intr)?;
            let (src, src_depth) = raycast_render(&scene, &src_traj, cfg.n_frames)?;
            let (tgt, _) = raycast_render(&scene, &tgt_traj, cfg.n_frames)?;

            let rel = format!("scene_{scene_id:03}/sample_{sample_id:02}");
            let dir = out_dir.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            src.write_dir(&dir.join("src"))?;
            tgt.write_dir(&dir.join("tgt"))?;
            ptv::write(&dir.join("src_depth.ptv"), &src_depth.0)?;
            write_text(&dir.join("src_traj.json"), &src_traj.to_json())?;
            write_text(&dir.join("tgt_traj.json"), &tgt_traj.to_json())?;
            samples.push(SampleEntry {
                scene_id,
                sample_id,
                scene_seed,
                kind,
                magnitude,
                src: format!("{rel}/src"),
                tgt: format!("{rel}/tgt"),
                src_depth: format!("{rel}/src_depth.ptv"),
                src_traj: format!("{rel}/src_traj.json"),
                tgt_traj: format!("{rel}/tgt_traj.json"),
                dir: rel,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        intrinsics: intr,
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out_dir.join("manifest.json"), &(text + "\n"))?;
    Ok(manifest)
}

/// Everything needed to train on or evaluate one sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub entry: SampleEntry,
    pub scene: SceneSpec,
    pub src: Video,
    pub src_depth: DepthVideo,
    pub src_traj: Trajectory,
    pub tgt: Video,
    pub tgt_traj: Trajectory,
}

pub const PROXY_DIR: &str = "proxy";
pub const PROXY_MASK: &str = "proxy_mask.ptv";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Opens a dataset from its `manifest.json` path or its directory.
    pub fn open(path: &Path) -> Result<Self, SceneError> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let bad = |msg: String| SceneError::Manifest {
            path: manifest_path.display().to_string(),
            msg,
        };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn sample_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.samples[i].dir)
    }

    pub fn load(&self, i: usize) -> Result<Sample, SceneError> {
        let e = &self.manifest.samples[i];
        let read_traj = |rel: &str| -> Result<Trajectory, SceneError> {
            let p = self.root.join(rel);
            let text = fs::read_to_string(&p).map_err(|err| io_err(&p, err))?;
            Ok(Trajectory::from_json(&text)?)
        };
        let src = Video::read_dir(&self.root.join(&e.src))?;
        let tgt = Video::read_dir(&self.root.join(&e.tgt))?;
        let src_depth = DepthVideo(ptv::read(&self.root.join(&e.src_depth))?);
        let src_traj = read_traj(&e.src_traj)?;
        let tgt_traj = read_traj(&e.tgt_traj)?;
        let n = self.manifest.config.n_frames;
        for (what, got) in [
            ("src video", src.frames()),
            ("tgt video", tgt.frames()),
            ("src depth", src_depth.frames()),
            ("src trajectory", src_traj.len()),
            ("tgt trajectory", tgt_traj.len()),
        ] {
            if got != n {
                return Err(SceneError::Manifest {
                    path: self.root.join(&e.dir).display().to_string(),
                    msg: format!("{what} has {got} frames, manifest says {n}"),
                });
            }
        }
        Ok(Sample {
            entry: e.clone(),
            scene: generate_scene(e.scene_seed),
            src,
            src_depth,
            src_traj,
            tgt,
            tgt_traj,
        })
    }

    /// The stored proxy for sample `i` if `render-proxy` has been run, else
    /// a freshly rendered one (identical, since both start from stored PPMs).
    pub fn proxy(&self, i: usize, sample: &Sample, downsample: usize) -> Result<ProxyVideo, SceneError> {
        let dir = self.sample_dir(i);
        let mask_path = dir.join(PROXY_MASK);
        if mask_path.exists() {
            let rgb = Video::read_dir(&dir.join(PROXY_DIR))?;
            let mask = ptv::read(&mask_path)?;
            if rgb.height() * downsample == sample.src.height() {
                return Ok(ProxyVideo { rgb, mask });
            }
        }
        Ok(render_proxy_video(
            &sample.src,
            &sample.src_depth,
            &sample.src_traj,
            &sample.tgt_traj,
            downsample,
        )?)
    }

    /// Renders and stores the proxy video of every sample.
    pub fn write_proxies(&self, downsample: usize) -> Result<Vec<f64>, SceneError> {
        let mut coverage = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let s = self.load(i)?;
            let proxy = render_proxy_video(&s.src, &s.src_depth, &s.src_traj, &s.tgt_traj, downsample)?;
            let dir = self.sample_dir(i);
            proxy.rgb.write_dir(&dir.join(PROXY_DIR))?;
            ptv::write(&dir.join(PROXY_MASK), &proxy.mask)?;
            coverage.push(proxy.coverage());
        }
        Ok(coverage)
    }
}

/// Pose-free helper: where a fiducial's center lands in a camera's image.
pub fn project_point(pose: &Pose, intr: &Intrinsics, world: &Vector3<f64>) -> Option<(f64, f64)> {
    let c = pose.world_to_camera(world);
    (c.z > 1e-9).then(|| intr.project(&c))
}
