use std::fs;
use std::path::Path;

use clap::Parser;
use viewshift_cli::ablate::{read_runs, AblationConfig, COMPARISON_CSV, RUNS_CSV};
use viewshift_cli::plot::{ERRORS_SVG, LOSS_SVG};
use viewshift_cli::{run_from, Cli, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use viewshift_core::model::ModelConfig;

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["viewshift"];
    full.extend_from_slice(args);
    run_from(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, seed: &str) -> i32 {
    cli(&["gen-data", "--scenes", "2", "--frames", "4", "--size", "16", "--seed", seed, "--out", s(out)])
}

#[test]
fn usage_errors_and_help_exit_codes() {
    assert_eq!(cli(&[]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["train", "--variant", "no-such-variant"]), EXIT_USAGE);
    assert_eq!(cli(&["train", "--schedule", "sideways"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn missing_config_fails_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(cli(&["eval", "--config", s(&missing)]), EXIT_FAILURE);
    let parsed = Cli::try_parse_from(["viewshift", "eval", "--config", s(&missing)]).unwrap();
    let err = viewshift_cli::run(&parsed).unwrap_err();
    assert!(format!("{err:#}").contains("missing.json"), "{err:#}");
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(gen(&a, "7"), EXIT_OK);
    assert_eq!(gen(&b, "7"), EXIT_OK);
    assert_eq!(gen(&c, "8"), EXIT_OK);
    let frame = "scene_001/sample_00/tgt/frame_0003.ppm";
    assert_eq!(fs::read(a.join(frame)).unwrap(), fs::read(b.join(frame)).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_ne!(fs::read(a.join(frame)).unwrap(), fs::read(c.join(frame)).unwrap());
}

#[test]
fn train_rejects_a_schedule_the_variant_cannot_use() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(gen(&data, "1"), EXIT_OK);
    let out = tmp.path().join("run");
    let args = [
        "train", "--data", s(&data), "--variant", "pose-only", "--schedule", "render-first", "--stage1-steps", "2",
        "--stage2-steps", "1", "--out", s(&out),
    ];
    assert_eq!(cli(&args), EXIT_FAILURE);
}

#[test]
fn ablate_then_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(gen(&data, "3"), EXIT_OK);
    assert_eq!(cli(&["render-proxy", "--data", s(&data)]), EXIT_OK);

    let mut cfg = AblationConfig::smoke(data.clone());
    cfg.base.stage1_steps = 1;
    cfg.base.stage2_steps = 1;
    cfg.base.model = ModelConfig {
        d: 8,
        depth: 1,
        heads: 2,
        patch: 4,
        ..ModelConfig::default()
    };
    cfg.eval_sampler_steps = 2;
    let cfg_path = tmp.path().join("ablate.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("ablate");
    assert_eq!(cli(&["--config", s(&cfg_path), "ablate", "--out", s(&out)]), EXIT_OK);

    let comparison = fs::read_to_string(out.join(COMPARISON_CSV)).unwrap();
    let mut lines = comparison.lines();
    assert_eq!(lines.next(), Some("variant,schedule,rot_err,trans_err,psnr,coverage"));
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["query-shared-rt", "baseline-fusion-rt", "render-only"]);
    let runs = read_runs(&out.join(RUNS_CSV)).unwrap();
    assert_eq!(runs.len(), 3);
    assert!(runs.iter().all(|r| r.psnr.is_some_and(f64::is_finite)));

    let log = out.join("query-shared-rt_pose-first_s0").join("log.csv");
    let plots = tmp.path().join("plots");
    let runs_csv = out.join(RUNS_CSV);
    let args = ["plot", "--log", s(&log), "--runs", s(&runs_csv), "--out", s(&plots)];
    assert_eq!(cli(&args), EXIT_OK);
    for f in [LOSS_SVG, ERRORS_SVG] {
        let svg = fs::read_to_string(plots.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }
    assert_eq!(cli(&["plot", "--out", s(&plots)]), EXIT_FAILURE);
}
