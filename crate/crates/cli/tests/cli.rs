use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"data":{"num_trajectories":12,"noise":0.1},"train":{"num_batches":50},"eval":{"episodes":2},"rwr":{"steps":100,"hidden_widths":[16,16]}}"#;

fn viplab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viplab"))
        .current_dir(dir)
        .env_remove("VIPLAB_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

/// Writes the small config and trains one encoder, returning its path.
fn setup(dir: &Path) -> String {
    std::fs::write(dir.join("c.json"), SMALL).unwrap();
    ok(viplab(dir, &["gen-data", "--config", "c.json", "--out", "data.bin", "--seed", "3"]));
    ok(viplab(dir, &["train", "--config", "c.json", "--data", "data.bin", "--out", "run", "--seed", "3"]));
    "run/encoder.venc".into()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    ok(viplab(dir.path(), &["gen-data", "--config", "c.json", "--out", "a.bin", "--seed", "9"]));
    ok(viplab(dir.path(), &["gen-data", "--config", "c.json", "--out", "b.bin", "--seed", "9"]));
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b.bin")).unwrap();
    assert_eq!(a, b);
    let resolved = std::fs::read_to_string(dir.path().join("a.bin.config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 9"));
}

#[test]
fn missing_dataset_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = viplab(dir.path(), &["train", "--data", "does_not_exist.bin", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does_not_exist.bin"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"loss":{"gama":0.9}}"#).unwrap();
    let o = viplab(dir.path(), &["gen-data", "--config", "bad.json", "--out", "x.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.gama"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(viplab(dir.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(viplab(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(viplab(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let enc = setup(d);
    assert!(d.join("run/metrics.csv").exists());
    assert!(d.join("run/config.resolved.json").exists());

    ok(viplab(d, &["plan", "--encoder", &enc, "--config", "c.json", "--out", "plan.csv", "--steps-out", "steps.csv"]));
    let csv = std::fs::read_to_string(d.join("plan.csv")).unwrap();
    assert!(csv.starts_with("episode,success,steps,final_error\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(d.join("plan.csv.config.json").exists());

    let o = viplab(d, &["plan", "--encoder", &enc, "--config", "c.json", "--out", "p0.csv", "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    for (kind, out) in [("curves", "curves.csv"), ("bumps", "bumps.csv"), ("hist", "hist.csv"), ("prop2", "prop2.json")] {
        ok(viplab(d, &["analyze", "--kind", kind, "--encoder", &enc, "--data", "data.bin", "--out", out]));
        assert!(d.join(out).exists(), "{kind}");
    }
}

#[test]
fn one_frame_bumps_exit_2_curve_too_short() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let enc = setup(d);
    // The frame cap cuts every trajectory to a single frame.
    std::fs::write(d.join("cap.json"), r#"{"analysis":{"frame_cap":1}}"#).unwrap();
    let o = viplab(d, &["analyze", "--kind", "bumps", "--encoder", &enc, "--data", "data.bin", "--config", "cap.json", "--out", "b.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("curve too short"), "{}", stderr(&o));
}

#[test]
fn dimension_mismatch_exits_2_with_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let enc = setup(d);
    std::fs::write(d.join("img.json"), r#"{"observation":"image16","data":{"num_trajectories":2}}"#).unwrap();
    ok(viplab(d, &["gen-data", "--config", "img.json", "--out", "img.bin"]));
    let o = viplab(d, &["analyze", "--kind", "bumps", "--encoder", &enc, "--data", "img.bin", "--out", "b.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("expects 2") && err.contains("256"), "{err}");
}

#[test]
fn rwr_at_zero_temperature_matches_bc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let enc = setup(d);
    let common = ["--encoder", enc.as_str(), "--config", "c.json", "--episodes", "2", "--seed", "5"];
    let mut rwr = vec!["offline-rl", "--mode", "rwr", "--tau", "0", "--out", "rwr"];
    rwr.extend(common);
    let mut bc = vec!["offline-rl", "--mode", "bc", "--out", "bc"];
    bc.extend(common);
    ok(viplab(d, &rwr));
    ok(viplab(d, &bc));
    let a = std::fs::read(d.join("rwr/policy.json")).unwrap();
    let b = std::fs::read(d.join("bc/policy.json")).unwrap();
    assert_eq!(a, b);
    assert!(d.join("rwr/eval.csv").exists());
}

#[test]
fn repro_single_check_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(viplab(dir.path(), &["repro", "--suite", "a6", "--out", "report.json"]));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["checks"][0]["id"], "A6");
}

#[test]
fn repro_rejects_unknown_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = viplab(dir.path(), &["repro", "--suite", "a12", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
}
