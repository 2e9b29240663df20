//! Train-and-evaluate sweeps over variants, schedules and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use viewshift_core::eval::{evaluate_params, Aggregates, EvalOptions, EvalReport, ReportConfig};
use viewshift_core::model::{ModelConfig, Variant};
use viewshift_core::training::{train, RunOptions, Schedule, TrainConfig};

pub const RUNS_CSV: &str = "runs.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// One entry of a sweep; without a schedule the variant's default is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    #[serde(default)]
    pub schedule: Option<Schedule>,
}

impl RunSpec {
    pub fn schedule(&self) -> Schedule {
        self.schedule.unwrap_or_else(|| Schedule::default_for(self.variant))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub dataset: PathBuf,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSpec>,
    /// Shared training settings. The stage budgets are those of a two-stage
    /// run; one-stage runs train for their sum.
    pub base: TrainConfig,
    pub eval_sampler_steps: usize,
    #[serde(default)]
    pub eval_limit: Option<usize>,
}

impl AblationConfig {
    /// Three variants on a small model, for quick end-to-end checks.
    pub fn smoke(dataset: PathBuf) -> Self {
        Self {
            dataset: dataset.clone(),
            seeds: vec![0],
            runs: [Variant::QuerySharedRt, Variant::BaselineFusionRt, Variant::RenderOnly]
                .into_iter()
                .map(|variant| RunSpec { variant, schedule: None })
                .collect(),
            base: TrainConfig {
                stage1_steps: 4,
                stage2_steps: 4,
                batch: 2,
                dataset,
                model: ModelConfig {
                    d: 16,
                    depth: 1,
                    heads: 2,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            eval_sampler_steps: 4,
            eval_limit: Some(2),
        }
    }

    pub fn train_config(&self, spec: &RunSpec, seed: u64) -> TrainConfig {
        let mut c = self.base.clone();
        c.dataset = self.dataset.clone();
        c.seed = seed;
        c.model.seed = seed;
        c.model.variant = spec.variant;
        c.schedule = Schedule::PoseFirst;
        c.set_schedule(spec.schedule());
        c
    }
}

/// Mean metrics of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: Variant,
    pub schedule: Schedule,
    pub seed: u64,
    pub rot_err: Option<f64>,
    pub trans_err: Option<f64>,
    pub psnr: Option<f64>,
    pub coverage: Option<f64>,
}

/// Metrics of one (variant, schedule) averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub schedule: Schedule,
    pub rot_err: Option<f64>,
    pub trans_err: Option<f64>,
    pub psnr: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn run_dir(out: &Path, spec: &RunSpec, seed: u64) -> PathBuf {
    out.join(format!("{}_{}_s{seed}", spec.variant, spec.schedule()))
}

/// Trains and evaluates every run for every seed, writing each run under
/// its own directory plus `runs.csv` and `comparison.csv` under `out`.
pub fn run_ablation(cfg: &AblationConfig, out: &Path, threads: usize) -> Result<Vec<RunRow>> {
    if cfg.runs.is_empty() || cfg.seeds.is_empty() {
        bail!("ablation needs at least one run and one seed");
    }
    let mut rows = Vec::new();
    for spec in &cfg.runs {
        for &seed in &cfg.seeds {
            let tc = cfg.train_config(spec, seed);
            let dir = run_dir(out, spec, seed);
            log::info!("training {} ({}) seed {seed}", spec.variant, spec.schedule());
            let state = train(
                &tc,
                None,
                &RunOptions {
                    threads,
                    out: Some(dir.clone()),
                    stop_after: None,
                },
            )
            .with_context(|| format!("run {}", dir.display()))?;
            let ds = viewshift_core::scenegen::Dataset::open(&cfg.dataset)?;
            let opts = EvalOptions {
                sampler_steps: cfg.eval_sampler_steps,
                seed,
                threads,
                limit: cfg.eval_limit,
            };
            let eval_rows = evaluate_params(&state.params, &ds, &opts)?;
            let report = EvalReport::new(
                ReportConfig {
                    variant: spec.variant,
                    seed,
                    sampler_steps: opts.sampler_steps,
                    checkpoint_hash: viewshift_core::eval::checkpoint_hash(&dir.join("final"))?,
                    dataset: cfg.dataset.display().to_string(),
                },
                eval_rows,
            );
            report.write(&dir)?;
            rows.push(run_row(spec, seed, &report.aggregates));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join(RUNS_CSV), &rows)?;
    write_csv(&out.join(COMPARISON_CSV), &compare(&rows))?;
    Ok(rows)
}

fn run_row(spec: &RunSpec, seed: u64, agg: &Aggregates) -> RunRow {
    RunRow {
        variant: spec.variant,
        schedule: spec.schedule(),
        seed,
        rot_err: agg.rot_err.mean,
        trans_err: agg.trans_err.mean,
        psnr: agg.psnr.mean,
        coverage: agg.coverage.mean,
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages runs sharing a (variant, schedule), in first-seen order.
pub fn compare(rows: &[RunRow]) -> Vec<ComparisonRow> {
    let mut keys: Vec<(Variant, Schedule)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.variant, r.schedule)) {
            keys.push((r.variant, r.schedule));
        }
    }
    keys.into_iter()
        .map(|(variant, schedule)| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.variant == variant && r.schedule == schedule).collect();
            ComparisonRow {
                variant,
                schedule,
                rot_err: mean(group.iter().map(|r| r.rot_err)),
                trans_err: mean(group.iter().map(|r| r.trans_err)),
                psnr: mean(group.iter().map(|r| r.psnr)),
                coverage: mean(group.iter().map(|r| r.coverage)),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<RunRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, seed: u64, rot: Option<f64>) -> RunRow {
        RunRow {
            variant,
            schedule: Schedule::default_for(variant),
            seed,
            rot_err: rot,
            trans_err: Some(seed as f64),
            psnr: Some(10.0),
            coverage: Some(0.5),
        }
    }

    #[test]
    fn comparison_averages_over_seeds() {
        let rows = vec![
            row(Variant::QuerySharedRt, 0, Some(0.1)),
            row(Variant::RenderOnly, 0, None),
            row(Variant::QuerySharedRt, 1, Some(0.3)),
        ];
        let c = compare(&rows);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].variant, Variant::QuerySharedRt);
        assert!((c[0].rot_err.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(c[0].trans_err, Some(0.5));
        assert_eq!(c[1].rot_err, None);
    }

    #[test]
    fn csv_header_and_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let rows = vec![row(Variant::NoKvConcat, 2, None)];
        let p = tmp.path().join("c.csv");
        write_csv(&p, &compare(&rows)).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "variant,schedule,rot_err,trans_err,psnr,coverage\nno-kv-concat,pose-first,,2.0,10.0,0.5\n"
        );
        let p = tmp.path().join("r.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_runs(&p).unwrap(), rows);
    }

    #[test]
    fn one_stage_runs_get_the_whole_budget() {
        let cfg = AblationConfig::smoke("d".into());
        let tc = cfg.train_config(&cfg.runs[1], 7);
        assert_eq!((tc.schedule, tc.stage1_steps, tc.stage2_steps), (Schedule::OneStage, 0, 8));
        assert_eq!((tc.seed, tc.model.seed), (7, 7));
        let tc = cfg.train_config(&cfg.runs[0], 7);
        assert_eq!((tc.schedule, tc.stage1_steps, tc.stage2_steps), (Schedule::PoseFirst, 4, 4));
    }
}
