//! Flow-matching training with staged condition schedules, Adam, and
//! resumable checkpoints.
//!
//! Every random draw of a step is keyed by `(run seed, step, batch index)`,
//! and per-element gradients are reduced in index order, so a run is a pure
//! function of its configuration and dataset bytes regardless of the thread
//! count or of interruptions.

mod adam;
mod state;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{build_example, Example, RENDER_DOWNSAMPLE};
use crate::eval::{evaluate_params, Aggregates, EvalError, EvalOptions};
use crate::model::{fm_loss, gaussian, is_attention_group, ModelConfig, ModelError, Params, Variant};
use crate::parallel::map_indexed;
use crate::scenegen::{mix_seed, Dataset, SceneError};
use crate::tensor::{Graph, Tensor};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use state::{TrainState, STATE_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training state {path}: {msg}")]
    State { path: String, msg: String },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which conditions are fed during each of the two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Camera only in stage 1, both conditions in stage 2.
    PoseFirst,
    /// Proxy render only in stage 1, both conditions in stage 2.
    RenderFirst,
    /// Both conditions from the first step; stage 1 is empty.
    OneStage,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::PoseFirst, Schedule::RenderFirst, Schedule::OneStage];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::PoseFirst => "pose-first",
            Schedule::RenderFirst => "render-first",
            Schedule::OneStage => "one-stage",
        }
    }

    /// `(camera, render)` allowed in `stage` (1 or 2).
    pub fn allowed(self, stage: u8) -> (bool, bool) {
        match (self, stage) {
            (Schedule::PoseFirst, 1) => (true, false),
            (Schedule::RenderFirst, 1) => (false, true),
            _ => (true, true),
        }
    }

    /// The schedule a variant trains with unless configured otherwise:
    /// single-pathway and fusion baselines train in one stage.
    pub fn default_for(variant: Variant) -> Schedule {
        match variant {
            Variant::PoseOnly | Variant::RenderOnly | Variant::BaselineFusionRt | Variant::BaselineFusionPlucker => {
                Schedule::OneStage
            }
            _ => Schedule::PoseFirst,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Schedule::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown schedule {s:?} (expected pose-first, render-first or one-stage)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default)]
    pub freeze_non_attention: bool,
    pub seed: u64,
    pub dataset: PathBuf,
    pub model: ModelConfig,
    /// Write a resumable checkpoint every this many steps (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record sampled-trajectory errors in the log every this many steps
    /// (0: never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_sampler_steps")]
    pub eval_sampler_steps: usize,
}

fn default_eval_samples() -> usize {
    4
}

fn default_eval_sampler_steps() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::PoseFirst,
            stage1_steps: 2000,
            stage2_steps: 3000,
            lr: 1e-3,
            batch: 8,
            freeze_non_attention: false,
            seed: 0,
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            checkpoint_every: 0,
            eval_every: 0,
            eval_samples: default_eval_samples(),
            eval_sampler_steps: default_eval_sampler_steps(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `variant` with its default schedule; one-stage runs move
    /// the stage-1 budget into stage 2.
    pub fn for_variant(variant: Variant, dataset: PathBuf) -> Self {
        let mut c = Self {
            dataset,
            model: ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            ..Self::default()
        };
        c.set_schedule(Schedule::default_for(variant));
        c
    }

    /// Switches schedule keeping the total step budget.
    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.schedule = schedule;
        if schedule == Schedule::OneStage {
            self.stage2_steps += self.stage1_steps;
            self.stage1_steps = 0;
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn stage_at(&self, step: usize) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }

    /// Conditions fed in `stage`: allowed by the schedule and supported by
    /// the variant.
    pub fn active_conditions(&self, stage: u8) -> Result<(bool, bool), TrainError> {
        let (cam, render) = self.schedule.allowed(stage);
        let v = self.model.variant;
        let active = (cam && v.uses_camera(), render && v.uses_render());
        if !active.0 && !active.1 {
            return Err(TrainError::Config(format!(
                "stage {stage} of the {} schedule feeds no condition variant {v} accepts",
                self.schedule
            )));
        }
        Ok(active)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.schedule == Schedule::OneStage && self.stage1_steps != 0 {
            return bad(format!("one-stage schedule with {} stage-1 steps", self.stage1_steps));
        }
        self.model.validate()?;
        if self.stage1_steps > 0 {
            self.active_conditions(1)?;
        }
        if self.stage2_steps > 0 {
            self.active_conditions(2)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Weights receiving updates.
    pub fn updates(&self, name: &str) -> bool {
        !self.freeze_non_attention || is_attention_group(name)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub rot_err: Option<f64>,
    pub trans_err: Option<f64>,
}

pub const LOG_HEADER: &str = "step,stage,loss,rot_err,trans_err";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.stage, r.loss, opt(r.rot_err), opt(r.trans_err));
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(format!("log must start with {LOG_HEADER:?}"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(LogRow {
                step: f[0].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                stage: f[1].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                loss: num(f[2])?,
                rot_err: opt(f[3])?,
                trans_err: opt(f[4])?,
            })
        })
        .collect()
}

/// Random draws of one batch element: sample index, time and noise.
#[derive(Clone, Debug)]
pub struct Draw {
    pub sample: usize,
    pub t: f64,
    pub eps: Tensor<f32>,
}

pub fn draw(seed: u64, step: usize, index: usize, n_samples: usize, shape: &[usize]) -> Draw {
    let key = mix_seed(mix_seed(seed, step as u64), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let sample = rng.random_range(0..n_samples);
    let t = rng.random::<f64>();
    Draw {
        sample,
        t,
        eps: gaussian(shape, mix_seed(key, 0xE95)),
    }
}

/// Loads every sample of the dataset as model inputs.
pub fn load_examples(dataset: &Dataset, model: &ModelConfig, threads: usize) -> Result<Vec<Example<f32>>, TrainError> {
    let m = &dataset.manifest.config;
    if !m.height.is_multiple_of(model.patch) || !m.width.is_multiple_of(model.patch) {
        return Err(TrainError::Config(format!(
            "patch {} does not divide the dataset frames {}×{}",
            model.patch, m.height, m.width
        )));
    }
    map_indexed(dataset.len(), threads, |i| -> Result<Example<f32>, TrainError> {
        let s = dataset.load(i)?;
        let proxy = if model.variant.uses_render() {
            Some(dataset.proxy(i, &s, RENDER_DOWNSAMPLE)?)
        } else {
            None
        };
        Ok(build_example(model, &s, proxy.as_ref())?)
    })
    .into_iter()
    .collect()
}

/// Mean loss and mean gradient over one batch; weights outside `trainable`
/// or untouched by the active conditions get no entry.
pub fn batch_gradients(
    params: &Params<f32>,
    examples: &[Example<f32>],
    cfg: &TrainConfig,
    step: usize,
    threads: usize,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>), TrainError> {
    let (cam, render) = cfg.active_conditions(cfg.stage_at(step))?;
    let per = map_indexed(cfg.batch, threads, |b| -> Result<_, TrainError> {
        let d = draw(cfg.seed, step, b, examples.len(), examples[0].z0.shape());
        let ex = &examples[d.sample];
        let cond = ex.cond.restricted(cam, render);
        let mut g = Graph::new();
        let w = params.bind(&mut g, |n| cfg.updates(n));
        let loss = fm_loss(&mut g, &w, &params.config, &ex.z0, d.t, &d.eps, &cond)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).map_err(ModelError::from)?;
        let mut out = BTreeMap::new();
        for (name, v) in w.iter() {
            if let Some(gr) = grads.get(*v) {
                out.insert(name.clone(), gr.clone());
            }
        }
        Ok((value, out))
    });
    let mut total = 0.0f64;
    let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for r in per {
        let (loss, grads) = r?;
        total += loss as f64;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let inv = 1.0 / cfg.batch as f32;
    for g in acc.values_mut() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    Ok((total / cfg.batch as f64, acc))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub threads: usize,
    /// Directory for `log.csv`, periodic checkpoints and `final/`.
    pub out: Option<PathBuf>,
    /// Stop after this many total steps (for interrupted runs).
    pub stop_after: Option<usize>,
}

pub const FINAL_DIR: &str = "final";
pub const LOG_FILE: &str = "log.csv";

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

/// Trains from scratch or from `resume` until the configured step budget
/// (or `opts.stop_after`) is reached.
pub fn train(cfg: &TrainConfig, resume: Option<TrainState>, opts: &RunOptions) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    if dataset.is_empty() {
        return Err(TrainError::Config(format!("dataset {} has no samples", cfg.dataset.display())));
    }
    let threads = opts.threads.max(1);
    let examples = load_examples(&dataset, &cfg.model, threads)?;
    let mut state = match resume {
        Some(s) => {
            if s.params.config != cfg.model || s.seed != cfg.seed {
                return Err(TrainError::Config(
                    "resumed state was trained with a different model config or seed".into(),
                ));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let adam = AdamConfig::with_lr(cfg.lr);
    let end = opts.stop_after.map_or(cfg.total_steps(), |s| s.min(cfg.total_steps()));
    while state.step < end {
        let step = state.step;
        let (loss, grads) = batch_gradients(&state.params, &examples, cfg, step, threads)?;
        adam_step(&mut state.params, &mut state.adam, &grads, &adam, |n| cfg.updates(n))?;
        state.step += 1;
        let mut row = LogRow {
            step,
            stage: cfg.stage_at(step),
            loss,
            rot_err: None,
            trans_err: None,
        };
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            let rows = evaluate_params(
                &state.params,
                &dataset,
                &EvalOptions {
                    sampler_steps: cfg.eval_sampler_steps,
                    seed: cfg.seed,
                    threads,
                    limit: Some(cfg.eval_samples),
                },
            )?;
            let agg = Aggregates::of(&rows);
            row.rot_err = agg.rot_err.mean;
            row.trans_err = agg.trans_err.mean;
        }
        log::debug!("step {step} stage {} loss {loss}", row.stage);
        state.log.push(row);
        if let Some(out) = &opts.out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.save(&checkpoint_dir(out, state.step))?;
            }
        }
    }
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        state.save(&out.join(FINAL_DIR))?;
        let p = out.join(LOG_FILE);
        fs::write(&p, log_csv(&state.log)).map_err(|e| io_err(&p, e))?;
    }
    Ok(state)
}
