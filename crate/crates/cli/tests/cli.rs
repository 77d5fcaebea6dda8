use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ffprop::config::RunConfig;
use ffprop::data::DatasetSpec;
use ffprop::dit::ModelConfig;
use ffprop::heads::HeadPartition;

fn ffprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffprop"))
        .args(args)
        .output()
        .expect("spawn ffprop")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Parses `error kind=<kind> message="<json>"` and returns the pair.
fn error_line(o: &Output) -> (String, String) {
    assert_eq!(o.status.code(), Some(1), "{}", stderr(o));
    let text = stderr(o);
    let line = text.lines().last().expect("an error line");
    let rest = line
        .strip_prefix("error kind=")
        .unwrap_or_else(|| panic!("unexpected line {line:?}"));
    let (kind, msg) = rest.split_once(" message=").expect("message field");
    (
        kind.to_string(),
        serde_json::from_str(msg).expect("message is a JSON string"),
    )
}

fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::toy(2, 4, 4, 4, 16, 2, 1),
        ..RunConfig::default()
    };
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.data.rect_min = 2;
    cfg.data.rect_max = 3;
    cfg.data.train_samples = 4;
    cfg.data.eval_samples = 2;
    cfg.steps = 6;
    cfg.heads.bootstrap_steps = 3;
    cfg.heads.samples = 2;
    cfg.eval.sampler_steps = 2;
    cfg.out_dir = dir.join("runs");
    cfg
}

#[test]
fn default_config_parses_back() {
    let o = ffprop(&["default-config"]);
    assert!(o.status.success());
    let cfg = RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn gen_data_writes_a_loadable_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.json");
    let o = ffprop(&[
        "gen-data",
        "--seed",
        "3",
        "--count",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec = DatasetSpec::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(spec.samples.len(), 5);
    assert_eq!(spec.render().unwrap().len(), 5);
}

#[test]
fn errors_are_machine_parsable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let (kind, msg) = error_line(&ffprop(&["train", "--config", missing.to_str().unwrap()]));
    assert_eq!(kind, "io");
    assert!(!msg.is_empty());

    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        RunConfig::default()
            .to_toml_string()
            .replace("seed = 0", "seed = 0\nturbo = true"),
    )
    .unwrap();
    let (kind, msg) = error_line(&ffprop(&["train", "--config", bad.to_str().unwrap()]));
    assert_eq!(kind, "configuration");
    assert!(msg.contains("turbo"), "{msg}");

    let garbage = dir.path().join("garbage.ffpk");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = dir.path().join("m.json");
    let (kind, _) = error_line(&ffprop(&[
        "classify-heads",
        "--ckpt",
        garbage.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(kind, "format");
}

#[test]
fn usage_errors_exit_2() {
    let o = ffprop(&["train", "--config", "x.toml", "--ablation", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(ffprop(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn grad_check_tolerance_controls_exit_code() {
    let o = ffprop(&["grad-check", "--component", "mmd", "--tolerance", "1e-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(
        line.starts_with("component=mmd h=1e-6 coordinates=192 "),
        "{line}"
    );

    let (kind, _) = error_line(&ffprop(&[
        "grad-check",
        "--component",
        "flow",
        "--tolerance",
        "0",
    ]));
    assert_eq!(kind, "numeric-input");
}

#[test]
fn train_classify_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = dir.path().join("tiny.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();

    let o = ffprop(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--ablation",
        "full",
        "--log-every",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = cfg.out_dir.join("full");
    for f in [
        "metrics.jsonl",
        "timing.jsonl",
        "checkpoint.ffpk",
        "partition.json",
        "eval_data.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cfg.steps);

    let ckpt = run.join("checkpoint.ffpk");
    let manifest = dir.path().join("manifest.json");
    let o = ffprop(&[
        "classify-heads",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--samples",
        "3",
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p = HeadPartition::load(&manifest).unwrap();
    assert_eq!(p.samples, 3);
    p.check_covers(cfg.model.blocks, cfg.model.heads).unwrap();

    let report = dir.path().join("report.txt");
    let data = run.join("eval_data.json");
    let o = ffprop(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("row "), "{text}");
    let json: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json.len(), 2);
    assert_eq!(json[0]["report"], json[1]["report"]);
    assert!(
        fs::read_to_string(report.with_extension("dat"))
            .unwrap()
            .lines()
            .count()
            > 1
    );
}
