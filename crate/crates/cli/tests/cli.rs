use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defnet::ablation::BenchmarkConfig;

fn defnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defnet"))
        .args(args)
        .env_remove("DEFNET_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not a JSON error line ({e}): {stderr}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = BenchmarkConfig {
        train_images: 12,
        val_images: 6,
        fit_images: 6,
        stages: 1,
        ..BenchmarkConfig::default()
    };
    cfg.training.base_epochs = 1;
    cfg.training.new_stage_epochs = 1;
    cfg.training.joint_epochs = 1;
    cfg.context_training.epochs = 1;
    cfg.network.def_branch.part_channels = 4;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(cfg: &Path, out: &Path, seed: &str) -> Output {
    defnet(&["gen-data", "--config", s(cfg), "--seed", seed, "--out", s(out)])
}

fn train(cfg: &Path, data: &Path, out: &Path, schedule: &str) -> Output {
    defnet(&[
        "train",
        "--config",
        s(cfg),
        "--seed",
        "3",
        "--data",
        s(data),
        "--schedule",
        schedule,
        "--out",
        s(out),
    ])
}

#[test]
fn gen_data_and_train_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&cfg, &a, "7")), 0);
    assert_eq!(code(&gen(&cfg, &b, "7")), 0);
    let fa = files(&a);
    assert!(fa.iter().any(|(p, _)| p.ends_with("proposals_val.jsonl")));
    assert_eq!(fa, files(&b));

    let (ma, mb) = (tmp.path().join("ma"), tmp.path().join("mb"));
    for m in [&ma, &mb] {
        let out = train(&cfg, &a, m, "multistage");
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fm = files(&ma);
    for name in ["model.json", "context.json", "stages.json", "trace.csv", "phases.csv"] {
        assert!(fm.iter().any(|(p, _)| p == Path::new(name)), "missing {name}");
    }
    assert_eq!(fm, files(&mb));
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&cfg, &a, "1");
    gen(&cfg, &b, "2");
    assert_ne!(files(&a), files(&b));
}

#[test]
fn detect_eval_and_ensemble_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&cfg, &data, "5")), 0);
    let (plain, staged) = (tmp.path().join("plain"), tmp.path().join("staged"));
    assert_eq!(code(&train(&cfg, &data, &plain, "plain")), 0);
    assert_eq!(code(&train(&cfg, &data, &staged, "multistage")), 0);

    let first_pass = plain.join("model.json");
    let mut scores = Vec::new();
    for (name, model) in [("plain", &plain), ("staged", &staged)] {
        let out_dir = tmp.path().join(format!("det_{name}"));
        let out = defnet(&[
            "detect",
            "--data",
            s(&data),
            "--model",
            s(model),
            "--first-pass",
            s(&first_pass),
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("stats.json")).unwrap()).unwrap();
        assert!(stats["kept"].as_u64().unwrap() <= stats["proposals"].as_u64().unwrap());

        let eval_dir = tmp.path().join(format!("eval_{name}"));
        let out = defnet(&[
            "eval",
            "--data",
            s(&data),
            "--detections",
            s(&out_dir.join("detections.jsonl")),
            "--out",
            s(&eval_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read_to_string(eval_dir.join("map.csv")).unwrap();
        assert!(csv.lines().count() >= 2);
        scores.push(format!("{name}={}", s(&out_dir.join("scores.jsonl"))));
    }

    for mode in ["all-cls", "per-cls"] {
        let out_dir = tmp.path().join(format!("ens_{mode}"));
        let out = defnet(&[
            "ensemble",
            "--mode",
            mode,
            "--data",
            s(&data),
            "--member",
            &scores[0],
            "--member",
            &scores[1],
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("spec.json").exists());
        assert!(out_dir.join("map.csv").exists());
    }
}

#[test]
fn ensemble_refuses_members_scored_on_different_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    gen(&cfg, &data, "5");
    let model = tmp.path().join("m");
    assert_eq!(code(&train(&cfg, &data, &model, "plain")), 0);
    let mut members = Vec::new();
    for (name, extra) in [("loose", vec!["--no-rejection"]), ("strict", vec!["--threshold", "0.5"])] {
        let out_dir = tmp.path().join(name);
        let mut args = vec![
            "detect",
            "--data",
            s(&data),
            "--model",
            s(&model),
            "--no-subbox",
            "--no-context",
            "--no-refine",
            "--out",
            s(&out_dir),
        ];
        args.extend(extra);
        assert_eq!(code(&defnet(&args)), 0);
        members.push(format!("{name}={}", s(&out_dir.join("scores.jsonl"))));
    }
    let out = defnet(&[
        "ensemble",
        "--mode",
        "all-cls",
        "--data",
        s(&data),
        "--member",
        &members[0],
        "--member",
        &members[1],
        "--out",
        s(&tmp.path().join("e")),
    ]);
    let kept_all = std::fs::read_to_string(tmp.path().join("loose/scores.jsonl"))
        .unwrap()
        .lines()
        .count();
    let kept_strict = std::fs::read_to_string(tmp.path().join("strict/scores.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_ne!(kept_all, kept_strict);
    assert_eq!(code(&out), 4);
    assert_eq!(error_line(&out)["error"], "schema");
}

#[test]
fn usage_errors_exit_2() {
    let out = defnet(&["gen-data", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert_eq!(error_line(&out)["code"], 2);

    let tmp = tempfile::tempdir().unwrap();
    let out = defnet(&["gen-data", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2, "a missing seed is a usage error");
    assert_eq!(error_line(&out)["error"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_defnet"))
        .args(["oracle-check", "--cases", "1"])
        .env("DEFNET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = defnet(&[
        "gen-data",
        "--seed",
        "1",
        "--config",
        s(&tmp.path().join("absent.json")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 3);
    let line = error_line(&out);
    assert_eq!(line["error"], "missing_file");
    assert!(line["message"].as_str().unwrap().contains("absent.json"));

    let out = defnet(&[
        "eval",
        "--data",
        s(tmp.path()),
        "--detections",
        s(&tmp.path().join("d.jsonl")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = defnet(&["gen-data", "--seed", "1", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 4);
    assert_eq!(error_line(&out)["error"], "schema");

    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    gen(&cfg, &data, "1");
    let model = tmp.path().join("m");
    std::fs::create_dir_all(&model).unwrap();
    std::fs::write(model.join("model.json"), "{\"version\": 99}").unwrap();
    let out = defnet(&[
        "detect",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--no-subbox",
        "--no-context",
        "--no-refine",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn invalid_arguments_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train_images"] = 0.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = defnet(&["gen-data", "--seed", "1", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 5);
    assert_eq!(error_line(&out)["error"], "invalid_argument");
}

#[test]
fn self_checks_pass() {
    let out = defnet(&["grad-check", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() >= 14);

    let out = defnet(&["oracle-check", "--cases", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&defnet(&["--help"])), 0);
    assert_eq!(code(&defnet(&["--version"])), 0);
}
