use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn geoid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch geoid")
}

fn ok(args: &[&str]) -> Output {
    let out = geoid(args);
    assert!(out.status.success(), "geoid {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn gen(dir: &Path, name: &str, views: &str, seed: &str) -> String {
    let out = dir.join(name).to_str().unwrap().to_owned();
    ok(&["gen", "--views", views, "--size", "32x32", "--seed", seed, "--out", &out]);
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "a", "3", "9");
    let b = gen(tmp.path(), "b", "3", "9");
    let c = gen(tmp.path(), "c", "3", "10");
    assert_eq!(dir_bytes(Path::new(&a)), dir_bytes(Path::new(&b)));
    assert_ne!(dir_bytes(Path::new(&a)), dir_bytes(Path::new(&c)));
}

#[test]
fn guide_then_score_saved_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = gen(tmp.path(), "bundle", "6", "1");
    let guided = tmp.path().join("guided");
    let report = tmp.path().join("report.json");
    ok(&["guide", "--bundle", &bundle, "--steps", "20", "--seed", "3", "--out", guided.to_str().unwrap()]);
    assert!(guided.join("manifest.json").is_file());
    let summary = read_json(&guided.join("guidance.json"));
    assert_eq!(summary["trajectories"].as_array().unwrap().len(), 6 * 3);
    let csv = std::fs::read_to_string(guided.join("loss").join("loss_000_albedo.csv")).unwrap();
    assert!(csv.starts_with("step,loss\n"));
    assert_eq!(csv.lines().count(), 1 + 16);

    ok(&[
        "eval", "--bundle", &bundle, "--pred", guided.to_str().unwrap(), "--steps", "20", "--seed", "3",
        "--report", report.to_str().unwrap(),
    ]);
    let r = read_json(&report);
    let r = &r[0];
    assert_eq!(r["view_count"], 6);
    assert_eq!(r["runs"].as_array().unwrap().len(), 1);
    assert_eq!(r["runs"][0]["holdout_voxels"], summary["holdout_voxels"]);
    for m in r["modalities"].as_array().unwrap() {
        let g = m["mad_guided"]["mean"].as_f64().unwrap();
        let u = m["mad_unguided"]["mean"].as_f64().unwrap();
        assert!(g >= 0.0 && u > 0.0);
        assert!(m["psnr_guided"]["mean"].as_f64().is_some());
    }
}

#[test]
fn scoring_a_bundle_against_itself_reports_infinite_psnr_as_null() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("clean");
    ok(&["gen", "--views", "4", "--size", "32x32", "--clean", "--out", bundle.to_str().unwrap()]);
    let report = tmp.path().join("r.json");
    let b = bundle.to_str().unwrap();
    ok(&["eval", "--bundle", b, "--pred", b, "--report", report.to_str().unwrap()]);
    let r = read_json(&report);
    for m in r[0]["modalities"].as_array().unwrap() {
        assert!(m["psnr_guided"]["mean"].is_null());
        assert_eq!(m["rmse_guided"]["mean"], 0.0);
        assert_eq!(m["mad_guided"]["mean"], m["mad_unguided"]["mean"]);
    }
}

#[test]
fn consense_dumps_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = gen(tmp.path(), "bundle", "4", "2");
    let out = tmp.path().join("targets");
    ok(&["consense", "--bundle", &bundle, "--tau-c", "0.35", "--alpha", "2.5", "--n-min", "2", "--out", out.to_str().unwrap()]);
    let summary = read_json(&out.join("consensus.json"));
    assert!(summary["voxels"].as_u64().unwrap() > 0);
    let targets = summary["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 4 * 3);
    let bytes = std::fs::read(out.join("targets_000_albedo.gidb")).unwrap();
    assert_eq!(&bytes[..4], b"GIDB");
    assert_eq!(bytes[5], 3 + 2);
    assert_eq!(bytes.len(), 16 + 32 * 32 * 5 * 4);
}

#[test]
fn empty_consensus_fails_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = gen(tmp.path(), "single", "1", "0");
    let out = tmp.path().join("guided");
    let args = ["guide", "--bundle", &bundle, "--steps", "10", "--out", out.to_str().unwrap()];
    let failed = geoid(&args);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("--allow-degenerate"));
    let mut allowed = args.to_vec();
    allowed.push("--allow-degenerate");
    ok(&allowed);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn experiment_mode_reports_every_view_count() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = gen(tmp.path(), "bundle", "8", "4");
    let report = tmp.path().join("exp.json");
    let out = ok(&[
        "eval", "--bundle", &bundle, "--views", "4,8", "--seeds", "2", "--steps", "10",
        "--report", report.to_str().unwrap(),
    ]);
    let r = read_json(&report);
    let reports = r.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for (rep, v) in reports.iter().zip([4, 8]) {
        assert_eq!(rep["view_count"], v);
        assert_eq!(rep["runs"].as_array().unwrap().len(), 2);
        assert_eq!(rep["config"]["num_steps"], 10);
    }
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2 * 3);
}

#[test]
fn bad_arguments_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert!(!geoid(&["gen", "--size", "32by32", "--out", out.to_str().unwrap()]).status.success());
    assert!(!geoid(&["gen", "--size", "8x8", "--out", out.to_str().unwrap()]).status.success());
    let bundle = gen(tmp.path(), "b", "2", "0");
    let bad = ["guide", "--bundle", &bundle, "--eta", "-1", "--out", out.to_str().unwrap()];
    assert!(!geoid(&bad).status.success());
    let config = tmp.path().join("cfg.json");
    std::fs::write(&config, r#"{"holdout_fraction": 1.5}"#).unwrap();
    let bad = ["guide", "--bundle", &bundle, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(!geoid(&bad).status.success());
}
