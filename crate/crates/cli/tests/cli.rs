use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vsg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsg")).args(args).current_dir(dir).output().expect("vsg runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn non_empty_csv(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<String> = text.lines().map(String::from).collect();
    assert!(lines.len() > 1, "{}: {text}", path.display());
    lines
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vsg(&["--help"], dir.path()));
    for sub in ["generate", "fit-pca", "train", "eval", "predict", "plan", "compare-planners", "ingest"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vsg(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(vsg(&["train", "--out", "m.json"], dir.path()).status.code(), Some(2));
    let o = vsg(&["compare-planners", "--data", "d", "--ckpt", "c", "--n-range", "5..x", "--out", "o.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).lines().last().unwrap().starts_with("error[usage]: --n-range"));
}

#[test]
fn missing_data_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vsg(&["train", "--data", "no/such/dir", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error[io]: ") && last.contains("no/such/dir"), "{err}");
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn malformed_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    ok(vsg(&["generate", "--preset", "indoor", "--environments", "6", "--seed", "1", "--out", "data"], dir.path()));
    fs::write(dir.path().join("bad.json"), r#"{ "train": { "epochs": "many" } }"#).unwrap();
    let o = vsg(&["train", "--data", "data", "--config", "bad.json", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let last = stderr(&o).lines().last().unwrap().to_string();
    assert!(last.starts_with("error[parse]: ") && last.contains("train.epochs"), "{last}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(vsg(&["generate", "--preset", "indoor", "--environments", "8", "--seed", "2", "--out", "data"], d));
    fs::write(d.join("setup.json"), r#"{ "model": { "pca_dim": 16, "hidden_dim": 8, "train": { "epochs": 3 } } }"#).unwrap();
    let epochs = |extra: &[&str]| {
        let mut args = vec!["train", "--data", "data", "--config", "setup.json", "--out", "m.json", "--report", "r.json"];
        args.extend(extra);
        let o = ok(vsg(&args, d));
        // The resolved configuration is echoed, defaults included.
        let echo = stderr(&o);
        assert!(echo.contains("\"hidden_dim\":8") && echo.contains("\"patience\":20"), "{echo}");
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
        report["epochs"].as_array().unwrap().len()
    };
    assert_eq!(epochs(&[]), 3);
    assert_eq!(epochs(&["--epochs", "2"]), 2);
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(vsg(&["generate", "--preset", "indoor", "--environments", "20", "--seed", "7", "--out", "data"], d));
    ok(vsg(&["fit-pca", "--dim", "120", "--input", "data", "--out", "pca.json"], d));
    let o = ok(vsg(
        &["train", "--data", "data", "--pca", "pca.json", "--epochs", "5", "--tau", "p25", "--out", "model.json"],
        d,
    ));
    assert!(stdout(&o).starts_with("trained 5 epochs"), "{}", stdout(&o));
    ok(vsg(
        &["eval", "--ckpt", "model.json", "--data", "data", "--report", "eval.csv", "--thresholds", "thr.csv"],
        d,
    ));
    let rows = non_empty_csv(&d.join("eval.csv"));
    assert_eq!(rows[0], "variability,accuracy,precision,recall,f1,support");
    assert_eq!(rows.len(), 5);
    assert_eq!(non_empty_csv(&d.join("thr.csv")).len(), 20);

    ok(vsg(
        &["compare-planners", "--data", "data", "--ckpt", "model.json", "--n-range", "1..3", "--seeds", "4", "--out", "plan.csv"],
        d,
    ));
    let rows = non_empty_csv(&d.join("plan.csv"));
    assert_eq!(rows[0], "n,planner,mean_distance,std_distance,win_fraction,speedup");
    assert_eq!(rows.len(), 1 + 2 * 4);

    // Predict and plan on one stored scan.
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("data/manifest.json")).unwrap()).unwrap();
    let env = &manifest["environments"][0];
    let scan = |k: usize| format!("data/{}/{}.json", env["id"].as_str().unwrap(), env["scans"][k].as_str().unwrap());
    ok(vsg(&["predict", "--ckpt", "model.json", "--scene", &scan(0), "--out", "vsg.json"], d));
    let out: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("vsg.json")).unwrap()).unwrap();
    let input: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(scan(0))).unwrap()).unwrap();
    assert_eq!(out["nodes"].as_array().unwrap().len(), input["nodes"].as_array().unwrap().len());
    assert!(out["nodes"].as_array().unwrap().iter().all(|n| n["variability"]["p_position"].is_f64()));

    let o = ok(vsg(&["plan", "--ckpt", "model.json", "--scene", &scan(0), "--n", "2"], d));
    assert!(stdout(&o).starts_with("route: "), "{}", stdout(&o));
    let o = ok(vsg(&["plan", "--ckpt", "model.json", "--scene", &scan(0), "--n", "1", "--realized", &scan(1)], d));
    let text = stdout(&o);
    assert!(text.contains("coverage: distance") && text.contains("vsg: distance"), "{text}");

    // Same seed, same data.
    ok(vsg(&["generate", "--preset", "indoor", "--environments", "20", "--seed", "7", "--out", "again"], d));
    assert_eq!(fs::read_to_string(d.join(scan(1))).unwrap(), fs::read_to_string(d.join(scan(1).replacen("data", "again", 1))).unwrap());
}
