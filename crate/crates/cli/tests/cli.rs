use std::path::Path;
use std::process::{Command, Output};

fn redaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redaug")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = redaug(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stages_chain_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, models, repr, policy) =
        (tmp.path().join("data"), tmp.path().join("models"), tmp.path().join("repr"), tmp.path().join("policy"));
    ok(&["gen-data", "--task-set", "point_mass_2d-gravity", "--checkpoints", "1", "--budget", "400", "--behavior-steps", "400", "--out", p(&data)]);
    assert!(data.join("data.json").exists());
    ok(&["train-models", "--data", p(&data), "--ensemble-size", "2", "--out", p(&models)]);
    ok(&["train-repr", "--data", p(&data), "--models", p(&models), "--rounds", "1", "--variant", "no-up", "--out", p(&repr)]);
    assert!(repr.join("encoder").exists() && repr.join("adversarial-policy").exists());
    ok(&["train-policy", "--data", p(&data), "--encoder", p(&repr), "--bc-weight", "2.5", "--steps", "20", "--out", p(&policy)]);

    let on = tmp.path().join("on.json");
    let off = tmp.path().join("off.json");
    let table = ok(&["eval", "--data", p(&data), "--policy", p(&policy), "--encoder", p(&repr), "--protocol", "on", "--seeds", "1", "--episodes", "1", "--out", p(&on)]);
    assert!(table.contains("on/seen"));
    ok(&["eval", "--data", p(&data), "--policy", p(&policy), "--encoder", p(&repr), "--protocol", "off", "--seeds", "1", "--episodes", "1", "--out", p(&off)]);
    let cmp = tmp.path().join("cmp");
    let text = ok(&["report", "--runs", p(&on), p(&off), "--out", p(&cmp)]);
    assert_eq!(text.lines().count(), 3);
    assert!(cmp.join("comparison.json").exists());
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = redaug(&["train-repr", "--data", p(tmp.path()), "--variant", "full", "--out", p(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = redaug(&["gen-data", "--checkpoints", "2", "--out", p(&tmp.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no_such_field": true}"#).unwrap();
    assert!(!redaug(&["run", "--config", p(&cfg)]).status.success());
}
