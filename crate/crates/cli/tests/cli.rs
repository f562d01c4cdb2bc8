use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use weft_core::decode::EvalReport;
use weft_core::verify::VerifyReport;

const SMALL: &str = r#"
[task]
name = "modadd"
train_size = 64
eval_size = 20

[model]
d_model = 32
n_heads = 4
ffn_hidden = 64
max_seq_len = 16

[train]
batch_size = 4
grad_accum = 2
max_steps = 12
seed = 5
"#;

fn weft(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weft"))
        .args(args)
        .current_dir(cwd)
        .env_remove("WEFT_OUT_DIR")
        .output()
        .expect("spawn weft")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn verify_fast_passes_and_report_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = weft(&["verify", "--profile", "fast", "--out", "v"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("v/verify_report.json")).unwrap();
    let report: VerifyReport = serde_json::from_str(&text).unwrap();
    assert!(report.passed);
    assert!(report.checks.iter().all(|c| c.passed && c.observed.is_finite() && c.tolerance >= 0.0));
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["profile", "seed", "faults", "passed", "checks"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("v/run_config.toml").is_file());
}

#[test]
fn injected_sign_flip_fails_score_ratio_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = weft(&["verify", "--out", "v", "--inject-fault", "beta-sign"], dir.path());
    assert_eq!(code(&o), 1);
    let report: VerifyReport = serde_json::from_str(&fs::read_to_string(dir.path().join("v/verify_report.json")).unwrap()).unwrap();
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["score_ratio_closed_form"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL score_ratio_closed_form"));
}

#[test]
fn weft_uniform_and_sft_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = weft(&["train", &cfg, "--loss", "sft", "--out", "sft"], dir.path());
    let b = weft(&["train", &cfg, "--loss", "weft", "--scheme", "uniform", "--out", "uni"], dir.path());
    assert_eq!((code(&a), code(&b)), (0, 0), "{}", String::from_utf8_lossy(&b.stderr));
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("sft", "metrics.jsonl"), read("uni", "metrics.jsonl"));
    assert_eq!(read("sft", "model.ckpt"), read("uni", "model.ckpt"));
    assert_eq!(String::from_utf8(read("sft", "metrics.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn rerun_and_resolved_config_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&weft(&["train", &cfg, "--loss", "weft", "--seed", "9", "--out", "a"], dir.path())), 0);
    assert_eq!(code(&weft(&["train", &cfg, "--loss", "weft", "--seed", "9", "--out", "b"], dir.path())), 0);
    let resolved = dir.path().join("a/run_config.toml").display().to_string();
    assert_eq!(code(&weft(&["train", &resolved, "--out", "c"], dir.path())), 0);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for other in ["b", "c"] {
        assert_eq!(read("a", "metrics.jsonl"), read(other, "metrics.jsonl"));
        assert_eq!(read("a", "model.ckpt"), read(other, "model.ckpt"));
    }
    let text = String::from_utf8(read("a", "run_config.toml")).unwrap();
    assert!(text.contains("seed = 9") && text.contains("loss = \"weft\""));
    let first = String::from_utf8(read("a", "metrics.jsonl")).unwrap();
    assert!(first.contains("\"forward_passes_per_example\":2.0"));
}

#[test]
fn dream_reads_p_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&weft(&["train", &cfg, "--loss", "dream", "--steps", "2", "--out", "d"], dir.path())), 0);
    let text = fs::read_to_string(dir.path().join("d/run_config.toml")).unwrap();
    assert!(text.contains("dream_p = 0.3"));
    let p = dir.path().join("p.toml");
    fs::write(&p, format!("{SMALL}dream_p = 0.5\n")).unwrap();
    let p = p.display().to_string();
    assert_eq!(code(&weft(&["train", &p, "--loss", "dream", "--steps", "2", "--out", "e"], dir.path())), 0);
    assert!(fs::read_to_string(dir.path().join("e/run_config.toml")).unwrap().contains("dream_p = 0.5"));
}

#[test]
fn eval_is_deterministic_and_respects_decode_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&weft(&["train", &cfg, "--out", "t"], dir.path())), 0);
    let a = weft(&["eval", "t/model.ckpt", "--out", "e1"], dir.path());
    let b = weft(&["eval", "t/model.ckpt", "--out", "e2", "--gen-length", "2", "--block-length", "1", "--steps", "2"], dir.path());
    assert_eq!((code(&a), code(&b)), (0, 0), "{}", String::from_utf8_lossy(&a.stderr));
    let load = |d: &str| -> EvalReport { serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("eval_report.json")).unwrap()).unwrap() };
    let (r1, r2) = (load("e1"), load("e2"));
    assert_eq!(r1.samples, 20);
    assert_eq!((r1.decode.n_steps, r1.decode.block_length), (1, 2));
    assert_eq!((r2.decode.n_steps, r2.decode.block_length), (2, 1));
    assert!((0.0..=1.0).contains(&r1.accuracy()));
    assert_eq!(code(&weft(&["eval", "t/model.ckpt", "--out", "e3"], dir.path())), 0);
    assert_eq!(load("e1").per_task, load("e3").per_task);
}

#[test]
fn eval_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&weft(&["eval", "missing.ckpt", "--out", "e"], dir.path())), 2);
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&weft(&["eval", "junk.ckpt", "--out", "e"], dir.path())), 2);
}

#[test]
fn bench_forward_ratio_and_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = weft(&["bench", &cfg, "--steps", "3", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b/bench_report.json")).unwrap()).unwrap();
    assert_eq!(r["forward_ratio"], 2.0);
    assert_eq!(r["arms"][0]["forward_passes"], 3 * 8);
    assert_eq!(r["arms"][1]["forward_passes"], 2 * 3 * 8);
    assert_eq!(r["reference_overhead_pct"], 24.0);

    let o = weft(&["bench", &cfg, "--steps", "0", "--out", "z"], dir.path());
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("z/bench_report.json")).unwrap()).unwrap();
    assert_eq!(r["arms"].as_array().unwrap().len(), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(code(&weft(&["train", &cfg, "--loss", "mystery"], dir.path())), 2);
    assert_eq!(code(&weft(&["train", &cfg, "--scheme", "cubic"], dir.path())), 2);
    fs::write(dir.path().join("bad.toml"), "[train]\nclip_norm = 0.0\n").unwrap();
    assert_eq!(code(&weft(&["train", "bad.toml"], dir.path())), 2);
    fs::write(dir.path().join("typo.toml"), "[train]\nlearnin_rate = 1.0\n").unwrap();
    assert_eq!(code(&weft(&["bench", "typo.toml"], dir.path())), 2);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_weft"))
        .args(["bench", "--steps", "0"])
        .current_dir(dir.path())
        .env("WEFT_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from_env/bench_report.json").is_file());
    assert!(dir.path().join("from_env/run_config.toml").is_file());
}
