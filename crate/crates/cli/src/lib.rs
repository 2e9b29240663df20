//! Command-line surface: dataset generation, proxy rendering, training,
//! sampling, evaluation, ablations and plots.

pub mod ablate;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use viewshift_core::conditioning::{build_example, RENDER_DOWNSAMPLE};
use viewshift_core::eval::{eval_run, EvalOptions};
use viewshift_core::model::{euler_sample, latent_to_video, DitDenoiser, Params, Variant};
use viewshift_core::scenegen::{make_dataset, mix_seed, Dataset, DatasetConfig, SourceMotion};
use viewshift_core::training::{train, RunOptions, Schedule, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "viewshift", version, about = "Camera-controlled novel-view video generation at desk scale")]
pub struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset.
    GenData(GenDataArgs),
    /// Render and store the proxy video of every sample.
    RenderProxy(DataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Sample one target video from a checkpoint and write PPM frames.
    Sample(SampleArgs),
    /// Evaluate a checkpoint and write report.json and report.csv.
    Eval(EvalArgs),
    /// Train and evaluate a list of variant/schedule runs.
    Ablate(AblateArgs),
    /// Render loss curves and error bars as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub trajs_per_scene: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame height and width.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_parser = parse_source_motion)]
    pub source_motion: Option<SourceMotion>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory or manifest path.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    pub stage1_steps: Option<usize>,
    #[arg(long)]
    pub stage2_steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many steps have been taken in total.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Sample index in the manifest.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
}

/// Contents of an `eval --config` file; flags take precedence.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub sampler_steps: Option<usize>,
    pub limit: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset used when no configuration is given.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Training logs to draw as loss curves.
    #[arg(long = "log")]
    pub logs: Vec<PathBuf>,
    /// Per-run table written by `ablate`.
    #[arg(long)]
    pub runs: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?} (expected one of {})", names.join(", "))
    })
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse()
}

fn parse_source_motion(s: &str) -> Result<SourceMotion, String> {
    match s {
        "static" => Ok(SourceMotion::Static),
        "gentle-pan" => Ok(SourceMotion::GentlePan),
        _ => Err(format!("unknown source motion {s:?} (expected static or gentle-pan)")),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::RenderProxy(a) => {
            let ds = Dataset::open(&a.data)?;
            let coverage = ds.write_proxies(RENDER_DOWNSAMPLE)?;
            let mean = coverage.iter().sum::<f64>() / coverage.len().max(1) as f64;
            log::info!("rendered {} proxies, mean coverage {mean:.4}", coverage.len());
            Ok(())
        }
        Command::Train(a) => train_cmd(cli, a, threads),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval_cmd(cli, a, threads),
        Command::Ablate(a) => {
            let mut cfg = match &cli.config {
                Some(p) => read_json(p)?,
                None => ablate::AblationConfig::smoke(a.data.clone()),
            };
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let out = cli.out.clone().unwrap_or_else(|| "runs/ablate".into());
            let results = ablate::run_ablation(&cfg, &out, threads)?;
            log::info!("wrote {} runs to {}", results.len(), out.display());
            Ok(())
        }
        Command::Plot(a) => {
            let out = cli.out.clone().unwrap_or_else(|| "plots".into());
            if a.logs.is_empty() && a.runs.is_none() {
                bail!("nothing to plot: pass --log and/or --runs");
            }
            plot::plot_files(&a.logs, a.runs.as_deref(), &out)
        }
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let mut cfg: DatasetConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.n_scenes = n;
    }
    if let Some(n) = a.trajs_per_scene {
        cfg.trajs_per_scene = n;
    }
    if let Some(n) = a.frames {
        cfg.n_frames = n;
    }
    if let Some(n) = a.size {
        cfg.height = n;
        cfg.width = n;
    }
    if let Some(m) = a.source_motion {
        cfg.source_motion = m;
    }
    let out = cli.out.clone().unwrap_or_else(|| "data".into());
    let manifest = make_dataset(&cfg, &out)?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

/// The training configuration a `train` invocation resolves to.
pub fn resolve_train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::for_variant(
            a.variant.unwrap_or(Variant::QuerySharedRt),
            a.data.clone().unwrap_or_else(|| "data".into()),
        ),
    };
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(d) = &a.data {
        cfg.dataset = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(n) = a.stage1_steps {
        cfg.stage1_steps = n;
    }
    if let Some(n) = a.stage2_steps {
        cfg.stage2_steps = n;
    }
    if let Some(s) = a.schedule {
        cfg.set_schedule(s);
    }
    if let Some(n) = a.batch {
        cfg.batch = n;
    }
    if let Some(x) = a.lr {
        cfg.lr = x;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, a: &TrainArgs, threads: usize) -> Result<()> {
    let cfg = resolve_train_config(cli, a)?;
    let out = cli.out.clone().unwrap_or_else(|| "runs/train".into());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;
    let resume = match &a.resume {
        Some(dir) => Some(TrainState::load(dir, Some(&cfg.model))?),
        None => None,
    };
    let state = train(
        &cfg,
        resume,
        &RunOptions {
            threads,
            out: Some(out.clone()),
            stop_after: a.stop_after,
        },
    )?;
    if let Some(last) = state.log.last() {
        log::info!("step {} loss {:.5}", state.step, last.loss);
    }
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let params = Params::<f32>::load(&a.checkpoint, None)?;
    let ds = Dataset::open(&a.data)?;
    if a.index >= ds.len() {
        bail!("sample index {} out of range for {} ({} samples)", a.index, a.data.display(), ds.len());
    }
    let s = ds.load(a.index)?;
    let proxy = match params.config.variant.uses_render() {
        true => Some(ds.proxy(a.index, &s, RENDER_DOWNSAMPLE)?),
        false => None,
    };
    let ex = build_example::<f32>(&params.config, &s, proxy.as_ref())?;
    let seed = mix_seed(cli.seed.unwrap_or(0), a.index as u64);
    let den = DitDenoiser {
        params: &params,
        cond: &ex.cond,
    };
    let z = euler_sample(&den, ex.z0.shape(), a.steps, seed)?;
    let video = latent_to_video(&z, ex.cond.grid, params.config.patch)?;
    let out = cli.out.clone().unwrap_or_else(|| "samples".into());
    video.write_dir(&out.join("frames"))?;
    log::info!("wrote {} frames to {}", video.frames(), out.join("frames").display());
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs, threads: usize) -> Result<()> {
    let file: EvalFile = match &cli.config {
        Some(p) => read_json(p)?,
        None => EvalFile::default(),
    };
    let checkpoint = a
        .checkpoint
        .clone()
        .or(file.checkpoint)
        .context("no checkpoint given (use --checkpoint or the config's \"checkpoint\")")?;
    let dataset = a.data.clone().or(file.dataset).unwrap_or_else(|| "data".into());
    let defaults = EvalOptions::default();
    let opts = EvalOptions {
        sampler_steps: a.steps.or(file.sampler_steps).unwrap_or(defaults.sampler_steps),
        seed: cli.seed.or(file.seed).unwrap_or(defaults.seed),
        threads,
        limit: a.limit.or(file.limit),
    };
    let out = cli.out.clone().unwrap_or_else(|| "runs/eval".into());
    let report = eval_run(&checkpoint, &dataset, &out, &opts)?;
    let agg = &report.aggregates;
    let show = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    log::info!(
        "{} samples: rot_err {} trans_err {} psnr {}",
        report.rows.len(),
        show(agg.rot_err.mean),
        show(agg.trans_err.mean),
        show(agg.psnr.mean)
    );
    Ok(())
}
