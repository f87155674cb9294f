use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use r3_core::diagnostics::parse_scatter_csv;
use r3_lab::io::load_trace;

const SMALL: &str = "\
model.d_model = 16
model.layers = 2
model.heads = 2
model.expert_hidden = 16
task.eval_prompts = 16
rl.batch_size = 16
diagnose.rollouts = 24
diagnose.repeat_sequences = 8
diagnose.save_traces = 3
";

fn r3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r3")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, format!("{SMALL}{extra}run.output_dir = {}\n", dir.join("out").display())).unwrap();
    path.to_str().unwrap().to_string()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn invalid_config_exits_1_naming_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.layerz = 3\nrl.group_size = one\n");
    let out = r3(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.layerz") && err.contains("rl.group_size"), "{err}");

    let cfg = write_config(dir.path(), "");
    let out = r3(&["train", "--config", &cfg, "--method", "gspo", "--tis-c", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rl.tis"));
    assert_eq!(r3(&["train"]).status.code(), Some(1));
}

#[test]
fn zero_steps_writes_header_and_initial_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.max_steps = 0\n");
    let out = r3(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = lines(&dir.path().join("out/metrics.jsonl"));
    assert_eq!(m.len(), 1);
    assert_eq!(m[0]["record"], "header");
    let e = lines(&dir.path().join("out/eval.jsonl"));
    assert_eq!(e.len(), 1);
    assert_eq!(e[0]["step"], 0);
    assert!(dir.path().join("out/best.r3ck").exists());
}

#[test]
fn train_flags_override_and_metrics_follow_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.max_steps = 2\nrun.eval_interval = 1\nrl.dynamic_sampling = false\n");
    let out = r3(&["train", "--config", &cfg, "--method", "gspo", "--replay", "none", "--mini-steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = lines(&dir.path().join("out/metrics.jsonl"));
    assert_eq!(m.len(), 3);
    let keys = [
        "step",
        "reward_mean",
        "entropy",
        "grad_norm",
        "kl_k3",
        "f_tau2",
        "resp_len_mean",
        "method",
        "replay",
        "mini_steps",
    ];
    for (i, rec) in m[1..].iter().enumerate() {
        let obj = rec.as_object().unwrap();
        assert_eq!(obj.keys().map(String::as_str).collect::<Vec<_>>().len(), keys.len());
        for k in keys {
            assert!(obj.contains_key(k), "missing {k}");
        }
        assert_eq!(rec["step"], i as u64 + 1);
        assert_eq!(rec["method"], "gspo");
        assert_eq!(rec["replay"], "none");
        assert_eq!(rec["mini_steps"], 2);
    }
    assert_eq!(lines(&dir.path().join("out/eval.jsonl")).len(), 3);
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        fs::create_dir_all(&d).unwrap();
        let cfg = write_config(&d, "run.max_steps = 2\nrun.eval_interval = 1\n");
        assert!(r3(&["train", "--config", &cfg]).status.success());
        ["metrics.jsonl", "eval.jsonl", "summary.json", "best.r3ck"].map(|f| fs::read(d.join("out").join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn diagnose_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = r3(&["diagnose", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    for f in ["scatter_no_replay.csv", "scatter_replay.csv", "scatter_repeated.csv"] {
        let rows = parse_scatter_csv(&fs::read_to_string(o.join(f)).unwrap()).unwrap();
        assert!(!rows.is_empty(), "{f}");
        assert!(rows.iter().all(|(a, b)| (0.0..=1.0).contains(a) && (0.0..=1.0).contains(b)));
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rollouts"], 24);
    assert_eq!(summary["router_diff_replay"], 0.0);
    let diffs: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("diff_stats.json")).unwrap()).unwrap();
    let levels: Vec<_> = diffs["replay"].as_array().unwrap().iter().map(|d| d["level"].clone()).collect();
    assert_eq!(levels, ["router", "token", "sequence"]);
    let tau: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("tau_curve.json")).unwrap()).unwrap();
    assert_eq!(tau["no_replay"]["points"].as_array().unwrap().len(), 9);
    for i in 0..3 {
        let t = load_trace(&o.join(format!("traces/rollout_{i:05}.r3mk"))).unwrap();
        assert_eq!((t.layers(), t.experts(), t.top_k()), (2, 8, 2));
    }
    let first = fs::read(o.join("summary.json")).unwrap();
    assert!(r3(&["diagnose", "--config", &cfg]).status.success());
    assert_eq!(fs::read(o.join("summary.json")).unwrap(), first);
}

#[test]
fn replay_verify_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = r3(&["replay-verify", "--config", &cfg]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");

    let cfg = write_config(dir.path(), "verify.inject_corruption = true\n");
    let out = r3(&["replay-verify", "--config", &cfg]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(2), "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL self_replay_identity")), "{text}");
}
