use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qcomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcomb")).args(args).output().expect("spawn qcomb")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled(name: &str) -> String {
    qcomb_core::fixtures::bundled_dir().join(name).display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn coincidence_on_bundled_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let input = bundled(qcomb_core::fixtures::RING2_FILE);
    let o = qcomb(&["--out", out, "--seed", "1", "coincidence", "--input", &input]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("coincidence.json"));
    let car = r["car"].as_f64().unwrap();
    assert!((car - 36.0).abs() <= 0.3, "car {car}");

    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["seed"], 1);
    assert_eq!(m["seed_source"], "flag");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    // the histogram passes through unchanged
    assert_eq!(m["inputs"][0]["sha256"], m["outputs"][0]["sha256"]);
}

#[test]
fn csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let input = bundled(qcomb_core::fixtures::RING2_FILE);
    let o = qcomb(&["--out", out, "--format", "csv", "coincidence", "--input", &input]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("coincidence.csv")).unwrap();
    assert!(text.starts_with("n_cc,n_acc,car,"));
    assert!(dir.path().join("window_sweep.csv").exists());
}

#[test]
fn tomography_on_bundled_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let input = bundled(qcomb_core::fixtures::TOMO_FILE);
    let o = qcomb(&["--out", out, "--seed", "3", "tomo", "--input", &input]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = json(&dir.path().join("tomography.json"))["fidelity"].as_f64().unwrap();
    assert!(f >= 0.995, "fidelity {f}");
}

#[test]
fn report_bytes_do_not_depend_on_threads() {
    let cfg = configs().join("ring2.toml");
    let cfg = cfg.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let o = qcomb(&["--config", cfg, "--out", dir.path().to_str().unwrap(), "--seed", "9", "--threads", threads, "sweep"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("sweep.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn seed_comes_from_config_when_no_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("ring2.toml");
    let o = qcomb(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["seed"], 42);
    assert_eq!(m["seed_source"], "config");
    assert!(m["config_digest"].as_str().unwrap().len() == 64);
    let stream = qcomb_core::TagStream::load(&dir.path().join("stream.qtag")).unwrap();
    assert!(stream.len() > 1000);
}

#[test]
fn zero_duration_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("ring2.toml")).unwrap().replace("duration_s = 5.0", "duration_s = 0.0");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = qcomb(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("duration_s"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("ring2.toml")).unwrap().replace("[pump]\n", "[pump]\npowr_mw = 1.0\n");
    let line = text.lines().position(|l| l.starts_with("powr_mw")).unwrap() + 1;
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = qcomb(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("powr_mw") && err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(qcomb(&["--bogus", "fixtures"]).status.code(), Some(2));
    assert_eq!(qcomb(&["coincidence"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    // needs --config
    let o = qcomb(&["--out", dir.path().to_str().unwrap(), "franson"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(qcomb(&["--help"]).status.success());
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcomb(&["--out", dir.path().to_str().unwrap(), "tomo", "--input", "/nonexistent/tomo.csv"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fixtures_then_fringe_fit() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert!(qcomb(&["--out", fx.to_str().unwrap(), "fixtures"]).status.success());
    let fringe = fx.join(qcomb_core::fixtures::FRINGE_FILE);
    let out = dir.path().join("fit");
    let o = qcomb(&["--out", out.to_str().unwrap(), "freqbin", "--input", fringe.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&out.join("freqbin.json"))["v_raw"].as_f64().unwrap();
    assert!(v > 0.8 && v < 1.0, "{v}");
}

#[test]
fn heralded_g2_from_hbt_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("ring2.toml");
    let o = qcomb(&[
        "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--format", "csv",
        "g2h", "--tau-max-ps", "5000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("g2.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 11);
}
