//! Sampling from a trained model, trajectory recovery on the generated
//! frames, and the per-sample / aggregate camera-accuracy report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{build_example, Example, RENDER_DOWNSAMPLE};
use crate::geometry::{GeometryError, TrajectoryKind};
use crate::model::{
    euler_sample, latent_to_video, Denoiser, DitDenoiser, ModelConfig, ModelError, Params, Variant,
};
use crate::parallel::map_indexed;
use crate::pose_recovery::{estimate_trajectory, PoseError};
use crate::scenegen::{mix_seed, Dataset, SceneError};
use crate::video::Video;

/// PSNR reported for identical videos.
pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("video shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `10·log10(1/MSE)` over all elements of two unit-range videos, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Video, b: &Video) -> Result<f64, EvalError> {
    if a.0.shape() != b.0.shape() {
        return Err(EvalError::Shape(a.0.shape().to_vec(), b.0.shape().to_vec()));
    }
    let n = a.0.numel().max(1) as f64;
    let mse = a
        .0
        .data()
        .iter()
        .zip(b.0.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: usize,
    pub sample_id: usize,
    pub kind: TrajectoryKind,
    pub magnitude: f64,
    /// `None` when no frame of the generated video was confident.
    pub rot_err: Option<f64>,
    pub trans_err: Option<f64>,
    pub psnr: f64,
    /// Fraction of proxy-render pixels covered by reprojected points.
    pub coverage: f64,
    pub confident_frames: usize,
}

/// Mean and population standard deviation over the rows that have a value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { n: 0, mean: None, std: None };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            n: v.len(),
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rot_err: Stat,
    pub trans_err: Stat,
    pub psnr: Stat,
    pub coverage: Stat,
    /// Rows without any confident frame.
    pub failed: usize,
}

impl Aggregates {
    pub fn of(rows: &[EvalRow]) -> Self {
        Self {
            rot_err: Stat::of(rows.iter().filter_map(|r| r.rot_err)),
            trans_err: Stat::of(rows.iter().filter_map(|r| r.trans_err)),
            psnr: Stat::of(rows.iter().map(|r| r.psnr)),
            coverage: Stat::of(rows.iter().map(|r| r.coverage)),
            failed: rows.iter().filter(|r| r.rot_err.is_none()).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub variant: Variant,
    pub seed: u64,
    pub sampler_steps: usize,
    /// SHA-256 over the checkpoint manifest and weight files.
    pub checkpoint_hash: String,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn new(config: ReportConfig, rows: Vec<EvalRow>) -> Self {
        let aggregates = Aggregates::of(&rows);
        Self { config, rows, aggregates }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scene_id,sample_id,kind,magnitude,rot_err,trans_err,psnr,coverage,confident_frames\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.scene_id,
                r.sample_id,
                r.kind,
                r.magnitude,
                opt(r.rot_err),
                opt(r.trans_err),
                r.psnr,
                r.coverage,
                r.confident_frames
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, text) in [(REPORT_JSON, self.to_json()), (REPORT_CSV, self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub sampler_steps: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    /// Evaluate only the first `limit` samples of the manifest.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sampler_steps: 20,
            seed: 0,
            threads: 1,
            limit: None,
        }
    }
}

/// Runs the sample → recover → score pipeline on the first samples of
/// `dataset`, with the denoiser for sample `i` built by `make(i, example,
/// noise_seed)`. Rows come back in manifest order.
pub fn evaluate_with<D, F>(
    dataset: &Dataset,
    cfg: &ModelConfig,
    opts: &EvalOptions,
    make: F,
) -> Result<Vec<EvalRow>, EvalError>
where
    D: Denoiser<f32>,
    F: Fn(usize, &Example<f32>, u64) -> Result<D, EvalError> + Sync,
{
    let n = opts.limit.map_or(dataset.len(), |l| l.min(dataset.len()));
    let intr = dataset.manifest.intrinsics;
    map_indexed(n, opts.threads, |i| -> Result<EvalRow, EvalError> {
        let sample = dataset.load(i)?;
        let proxy = dataset.proxy(i, &sample, RENDER_DOWNSAMPLE)?;
        let ex = build_example::<f32>(cfg, &sample, Some(&proxy))?;
        let seed = mix_seed(opts.seed, i as u64);
        let den = make(i, &ex, seed)?;
        let z = euler_sample(&den, ex.z0.shape(), opts.sampler_steps, seed)?;
        let video = latent_to_video(&z, ex.cond.grid, cfg.patch)?;
        let (rot_err, trans_err, confident_frames) = match estimate_trajectory(&video, &sample.scene, &intr) {
            Ok(est) => {
                let (r, t) = est.errors(&sample.tgt_traj)?;
                (Some(r), Some(t), est.confident_frames().len())
            }
            Err(PoseError::NoConfidentFrames) => (None, None, 0),
            Err(e) => return Err(e.into()),
        };
        Ok(EvalRow {
            scene_id: sample.entry.scene_id,
            sample_id: sample.entry.sample_id,
            kind: sample.entry.kind,
            magnitude: sample.entry.magnitude,
            rot_err,
            trans_err,
            psnr: psnr(&video, &sample.tgt)?,
            coverage: proxy.coverage(),
            confident_frames,
        })
    })
    .into_iter()
    .collect()
}

/// Samples with the trained network in `params`.
pub fn evaluate_params(
    params: &Params<f32>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>, EvalError> {
    struct Owned<'a> {
        params: &'a Params<f32>,
        cond: crate::model::Conditions<f32>,
    }
    impl Denoiser<f32> for Owned<'_> {
        fn velocity(&self, z: &crate::tensor::Tensor<f32>, t: f64) -> Result<crate::tensor::Tensor<f32>, ModelError> {
            DitDenoiser {
                params: self.params,
                cond: &self.cond,
            }
            .velocity(z, t)
        }
    }
    evaluate_with(dataset, &params.config, opts, |_, ex, _| {
        Ok(Owned {
            params,
            cond: ex.cond.clone(),
        })
    })
}

/// SHA-256 of a checkpoint directory's manifest followed by its weight files
/// in manifest order.
pub fn checkpoint_hash(dir: &Path) -> Result<String, EvalError> {
    let params = Params::<f32>::load(dir, None)?;
    let mut h = Sha256::new();
    let manifest = dir.join("model.json");
    h.update(fs::read(&manifest).map_err(|e| io_err(&manifest, e))?);
    for name in params.names() {
        let p = dir.join("weights").join(format!("{name}.ptv"));
        h.update(fs::read(&p).map_err(|e| io_err(&p, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Evaluates the checkpoint in `checkpoint` on `dataset` and writes
/// `report.json` and `report.csv` under `out`.
pub fn eval_run(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let params = Params::<f32>::load(checkpoint, None)?;
    let ds = Dataset::open(dataset)?;
    if ds.is_empty() {
        log::warn!("dataset {} has no samples; writing an empty report", dataset.display());
    }
    let rows = evaluate_params(&params, &ds, opts)?;
    let report = EvalReport::new(
        ReportConfig {
            variant: params.config.variant,
            seed: opts.seed,
            sampler_steps: opts.sampler_steps,
            checkpoint_hash: checkpoint_hash(checkpoint)?,
            dataset: dataset.display().to_string(),
        },
        rows,
    );
    report.write(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn video(v: f32) -> Video {
        Video(Tensor::full([2, 3, 4, 4], v))
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&video(0.3), &video(0.3)).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&video(0.0), &video(1.0)).unwrap(), 0.0);
        let a = video(0.25);
        let b = video(0.35);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Video(Tensor::zeros([1, 3, 4, 4]))).is_err());
    }

    #[test]
    fn aggregates_are_exact_means_of_rows() {
        let row = |r: Option<f64>, p: f64| EvalRow {
            scene_id: 0,
            sample_id: 0,
            kind: TrajectoryKind::PanLeft,
            magnitude: 0.3,
            rot_err: r,
            trans_err: r.map(|x| 2.0 * x),
            psnr: p,
            coverage: 0.5,
            confident_frames: 3,
        };
        let rows = vec![row(Some(0.1), 20.0), row(None, 10.0), row(Some(0.3), 30.0)];
        let a = Aggregates::of(&rows);
        assert_eq!(a.failed, 1);
        assert_eq!(a.rot_err.n, 2);
        assert_eq!(a.rot_err.mean, Some((0.1 + 0.3) / 2.0));
        assert_eq!(a.psnr.mean, Some(20.0));
        assert!((a.psnr.std.unwrap() - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of([]).mean, None);
    }

    #[test]
    fn report_csv_leaves_missing_errors_blank() {
        let rows = vec![EvalRow {
            scene_id: 1,
            sample_id: 0,
            kind: TrajectoryKind::ZoomIn,
            magnitude: 0.5,
            rot_err: None,
            trans_err: None,
            psnr: 12.5,
            coverage: 1.0,
            confident_frames: 0,
        }];
        let config = ReportConfig {
            variant: Variant::PoseOnly,
            seed: 0,
            sampler_steps: 1,
            checkpoint_hash: String::new(),
            dataset: String::new(),
        };
        let csv = EvalReport::new(config, rows).to_csv();
        assert_eq!(csv.lines().nth(1), Some("1,0,zoom-in,0.5,,,12.5,1,0"));
    }
}
