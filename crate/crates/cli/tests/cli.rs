use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sinklab(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sinklab"))
        .arg("run")
        .arg(&path)
        .args(extra)
        .env_remove("BB_SINK_SEED")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn tiny_train(out: &Path) -> String {
    format!(
        r#"{{"command": "train", "output_dir": {:?},
            "model": {{"d_model": 16, "d_mlp": 32}},
            "optim": {{"steps": 6, "batch": 4, "seq_len": 16, "probe_every": 2, "eval_batch": 4}}}}"#,
        out.to_str().unwrap()
    )
}

#[test]
fn export_spec_writes_hashed_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("spec");
    let cfg = format!(r#"{{"command": "export-spec", "output_dir": {:?}}}"#, out.to_str().unwrap());
    let o = sinklab(tmp.path(), &cfg, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let names: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["spec.json", "metrics.csv"]);
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("#schema=spec-tokens-v1\n"));

    let check = Command::new(env!("CARGO_BIN_EXE_sinklab")).arg("check").arg(&out).output().unwrap();
    assert!(check.status.success());
    fs::write(out.join("metrics.csv"), "tampered").unwrap();
    let check = Command::new(env!("CARGO_BIN_EXE_sinklab")).arg("check").arg(&out).output().unwrap();
    assert_eq!(check.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&check.stdout).contains("metrics.csv: hash mismatch"));
}

#[test]
fn schema_violations_exit_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sinklab(tmp.path(), "{\n  \"command\": \"train\",\n  \"optim\": {\"steps\": 1, \"lr\": 3}\n}", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    let o = sinklab(tmp.path(), r#"{"command": "fly"}"#, &[]);
    assert_eq!(o.status.code(), Some(2));

    let out = tmp.path().join("arch");
    let o = sinklab(tmp.path(), &tiny_train(&out), &["--set", "model.arch=attn+conv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(manifest(&out)["status"], "config_error");
}

#[test]
fn training_is_reproducible_and_seed_env_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(sinklab(tmp.path(), &tiny_train(&a), &[]).status.success());
    assert!(sinklab(tmp.path(), &tiny_train(&b), &[]).status.success());
    let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(a.join("losses.csv")).unwrap(), fs::read(b.join("losses.csv")).unwrap());

    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, tiny_train(&c)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sinklab")).arg("run").arg(&cfg).env("BB_SINK_SEED", "11").output().unwrap();
    assert!(o.status.success());
    assert_ne!(read(&a), read(&c));
    let m = manifest(&c);
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(11), Some("env")));
    assert_eq!(m["config"]["seed"], 11);
}

#[test]
fn intervene_reads_a_training_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(sinklab(tmp.path(), &tiny_train(&run), &[]).status.success());
    let out = tmp.path().join("iv");
    let cfg = format!(
        r#"{{"command": "intervene", "output_dir": {:?},
            "intervene": {{"checkpoint": {:?}, "ablations": ["none", "mlp", "attn", "layer:0", "head:0:0"], "batch": 4, "seq_len": 16}}}}"#,
        out.to_str().unwrap(),
        run.join("checkpoint.json").to_str().unwrap()
    );
    let o = sinklab(tmp.path(), &cfg, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["none", "mlp", "attn", "layer:0", "head:0:0"]);
    let m = manifest(&out);
    assert!(m["metrics"]["ablations"]["mlp"]["bigram_excess"].as_f64().unwrap() > 0.0);

    let o = sinklab(tmp.path(), &cfg.replace("\"layer:0\"", "\"layer:4\""), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("boom");
    let o = sinklab(tmp.path(), &tiny_train(&out), &["--set", r#"optim.optimizer={"tag":"sgd","lr":1e9}"#, "--set", "optim.steps=200"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "numeric_error");
    assert!(m["metrics"]["diverged_at"].as_u64().is_some());
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("#schema=train-log-v1\n"));
}

#[test]
fn theory_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let cfg = format!(r#"{{"command": "sim-residual", "output_dir": {:?}, "theory": {{"sim_steps": 500}}}}"#, out.to_str().unwrap());
    assert!(sinklab(tmp.path(), &cfg, &[]).status.success());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2 + 501);

    let out = tmp.path().join("flow");
    let cfg = format!(
        r#"{{"command": "flow", "output_dir": {:?}, "theory": {{"mode": "fix_alpha", "alpha0": 5.0, "t_end": 1e5}}}}"#,
        out.to_str().unwrap()
    );
    assert!(sinklab(tmp.path(), &cfg, &[]).status.success());
    let m = manifest(&out);
    assert!(m["metrics"]["beta_star_linf"].as_f64().unwrap() < 1e-4);
    assert_eq!(m["metrics"]["xi"].as_array().unwrap().len(), 64);

    let out = tmp.path().join("gc");
    let cfg = format!(r#"{{"command": "gradcheck", "output_dir": {:?}}}"#, out.to_str().unwrap());
    let o = sinklab(tmp.path(), &cfg, &[]);
    assert!(o.status.success(), "{}", fs::read_to_string(out.join("metrics.csv")).unwrap());
}

#[test]
fn verify_exits_1_when_a_check_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    // Too short a horizon for the sink logits to concentrate.
    let cfg = format!(r#"{{"command": "verify", "output_dir": {:?}, "theory": {{"joint_t_end": 1e3}}}}"#, out.to_str().unwrap());
    let o = sinklab(tmp.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    let verdicts: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("verdicts.json")).unwrap()).unwrap();
    assert!(verdicts.len() >= 12);
    let m = manifest(&out);
    let failed: Vec<&str> = m["metrics"]["failed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(failed, ["sink_logit_concentration"]);
}
