use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mla")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A fresh toy checkpoint in a temp dir.
fn init(dir: &Path) -> PathBuf {
    let path = dir.join("base.wmla");
    let o = mla(&["--seed", "3", "init", "--output", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn convert_reports_reduction_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = init(dir.path());
    let out = dir.path().join("dso.wmla");
    let o = mla(&["convert", "--input", p(&base), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("kv cache reduction [key_only]: 75.00%"), "{text}");
    assert!(text.contains("kv cache reduction [key_value]: 87.50%"), "{text}");
    assert_eq!(text.matches("svd relative error").count(), 2);
    assert!(out.exists());
}

#[test]
fn two_norm_without_calibration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = init(dir.path());
    let out = dir.path().join("x.wmla");
    let o = mla(&["convert", "--input", p(&base), "--output", p(&out), "--strategy", "2norm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("calibration required"), "{}", stderr(&o));
    assert!(!out.exists());

    let calib = dir.path().join("calib.jsonl");
    let o = mla(&["dataset", "--output", p(&calib), "--samples", "16"]);
    assert!(o.status.success());
    let o = mla(&[
        "convert", "--input", p(&base), "--output", p(&out), "--strategy", "2norm", "--calib", p(&calib),
        "--preserve-per-head", "2", "--latent-dim", "16",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("kv cache reduction [key_only]: 50.00%"));
}

#[test]
fn inspect_shows_mixed_dso_layers() {
    let dir = tempfile::tempdir().unwrap();
    let base = init(dir.path());
    let out = dir.path().join("dso.wmla");
    assert!(mla(&["convert", "--input", p(&base), "--output", p(&out)]).status.success());
    let o = mla(&["inspect", "--input", p(&out)]);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let layers = doc["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6);
    for l in layers {
        let name = l["layer"].as_str().unwrap();
        let want = if name.starts_with("decoder.") && name.ends_with("self_attn") { "mla_preserving" } else { "mha" };
        assert_eq!(l["variant"], want, "{name}");
    }
    assert_eq!(doc["conversion"]["placement"], "dso");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = init(dir.path());
    let lossless = dir.path().join("lossless.wmla");
    let lossy = dir.path().join("lossy.wmla");
    let o = mla(&[
        "convert", "--input", p(&base), "--output", p(&lossless), "--placement", "full", "--latent-dim", "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(mla(&["convert", "--input", p(&base), "--output", p(&lossy)]).status.success());

    let o = mla(&["verify", "--original", p(&base), "--converted", p(&base), "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = mla(&["verify", "--original", p(&base), "--converted", p(&lossless), "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let o = mla(&[
        "verify", "--original", p(&base), "--converted", p(&lossy), "--trials", "3", "--tolerance", "1e-12",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("worst input seed"));
}

#[test]
fn gradcheck_passes() {
    for variant in ["mha", "mla-preserving"] {
        let o = mla(&["gradcheck", "--variant", variant, "--samples", "20", "--batch", "2"]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(stdout(&o).contains("0 flagged"));
    }
}

#[test]
fn mem_sweep_grid_and_oom() {
    let o = mla(&["mem-sweep"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,placement,batch,seq_len,source_len,bytes_total,bytes_decoder_self,bytes_cross,bytes_encoder_self,oom");
    assert_eq!(lines.len(), 1 + 2 * 4 * 5);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = mla(&[
        "--out", p(&csv), "mem-sweep", "--batches", "64", "--lengths", "2048", "--budget", "5000000000",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("OOM: mha@64x2048"), "{}", stdout(&o));
    let written = std::fs::read_to_string(&csv).unwrap();
    let flags: Vec<&str> = written.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags, ["true", "false"]);
}

#[test]
fn finetune_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = init(dir.path());
    let tuned = dir.path().join("tuned.wmla");
    let metrics = dir.path().join("metrics.csv");
    let o = mla(&[
        "--out", p(&metrics), "finetune", "--input", p(&base), "--output", p(&tuned), "--samples", "40",
        "--max-len", "4", "--epochs", "1", "--batch-size", "8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,split,loss,token_accuracy\n1,train,"));
    let o = mla(&["eval", "--input", p(&tuned), "--samples", "40", "--max-len", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let o = mla(&["eval", "--input", p(&tuned), "--samples", "40", "--max-len", "4", "--min-accuracy", "1.01"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_and_format_errors() {
    assert_eq!(mla(&["convert", "--bogus"]).status.code(), Some(2));
    assert_eq!(mla(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.wmla");
    let o = mla(&["inspect", "--input", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    let junk = dir.path().join("junk.wmla");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = mla(&["inspect", "--input", p(&junk)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"));
}
