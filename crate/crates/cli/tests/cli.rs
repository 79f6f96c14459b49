use std::path::Path;
use std::process::{Command, Output};

use exlgm::data::{load_dataset, read_exclusions, read_fits, write_dataset};

const CONFIG: &str = r#"{
  "chain": {"n_iterations": 400, "n_burnin": 100, "thin": 1, "seed": 1},
  "simulate": {
    "grid": {"nx": 4, "ny": 4, "spacing": 1.0},
    "n_times": 400,
    "seed": 2,
    "truth": {"mode": "fixed", "mu": 10.0, "sigma": 1.5, "xi": 0.1}
  }
}"#;

fn exlgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exlgm")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(exlgm(&["--help"]).status.code(), Some(0));
    let out = exlgm(&["maxfit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(exlgm(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = exlgm(&["simulate", "--config", s(&dir.path().join("nope.json")), "--out", s(&dir.path().join("d.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"threshold_quantil": 0.9}"#).unwrap();
    let out = exlgm(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("d.csv"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn pipeline_with_an_interior_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let (data, fits, post) = (d.join("data.csv"), d.join("fits.csv"), d.join("post"));

    assert!(exlgm(&["simulate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    // silence an interior site so the Max step has to exclude it
    let mut ds = load_dataset(&data).unwrap();
    let k = ds.sites.iter().position(|x| x.lon == 1.0 && x.lat == 1.0).unwrap();
    ds.values[k].iter_mut().for_each(|v| *v = 0.0);
    write_dataset(&data, &ds).unwrap();

    let out = exlgm(&["maxfit", "--config", s(&cfg), "--data", s(&data), "--out", s(&fits)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_fits(&fits).unwrap().len(), 15);
    let excl = read_exclusions(&d.join("fits.exclusions.csv")).unwrap();
    assert_eq!(excl.len(), 1);
    assert_eq!(excl[0].site_id, ds.sites[k].site_id);

    let refused = exlgm(&["smooth", "--config", s(&cfg), "--fits", s(&fits), "--out", s(&post)]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("allow-exclusions"));

    let out = exlgm(&["smooth", "--config", s(&cfg), "--fits", s(&fits), "--out", s(&post), "--allow-exclusions"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(post.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["hyperparameters"].as_array().unwrap().len(), 7);
    assert_eq!(summary["intercepts"].as_array().unwrap().len(), 3);
    assert_eq!(summary["n_draws"], 300);

    let rl = d.join("rl.csv");
    let out = exlgm(&["returnlevels", "--config", s(&cfg), "--posterior", s(&post), "--out", s(&rl), "--period", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&rl).unwrap();
    assert_eq!(text.lines().count(), 1 + 15);

    let pred = d.join("pred.csv");
    let out = exlgm(&["predict", "--config", s(&cfg), "--posterior", s(&post), "--out", s(&pred), "--n-draws", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let vario = d.join("vario.csv");
    let out = exlgm(&["variogram", "--config", s(&cfg), "--fits", s(&fits), "--out", s(&vario), "--parameter", "tau"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_posterior_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = exlgm(&["returnlevels", "--config", s(&cfg), "--posterior", s(&dir.path().join("none")), "--out", s(&dir.path().join("rl.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}
