use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crowdflux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdflux"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn small_scenario(dir: &Path, noise: f64) -> PathBuf {
    let text = format!(
        r#"{{
  "schema": "crowdflux.scenario/1",
  "name": "small",
  "domain": {{"nx": 16, "ny": 16, "dx": 1.0, "dy": 1.0, "origin": [0.0, 0.0], "boundary": "outflow"}},
  "targets": [{{"label": "a", "position": [100.0, 8.0]}}, {{"label": "b", "position": [8.0, 100.0]}}],
  "initial": [
    {{"target": "a", "regions": [{{"shape": "gaussian", "center": [5.0, 8.0], "sigma": 2.0, "count": 60}}], "concentration": 6.0}},
    {{"target": "b", "regions": [{{"shape": "box", "min": [6.0, 2.0], "max": [10.0, 6.0], "density": 2.0}}], "concentration": 6.0}}
  ],
  "params": {{"noise": {noise}}},
  "run": {{"t_end": 1.0, "snapshot_every": 0.5, "seed": 3}},
  "hydro": {{"n_theta": 32}},
  "kernel_table": "{}"
}}"#,
        scenarios().join("zero_kernel.csv").display()
    );
    let path = dir.join("small.json");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_indicators_is_green() {
    let o = crowdflux(&["validate", "--suite", "indicators"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["suites"][0]["suite"], "indicators");
}

#[test]
fn injected_bessel_fault_names_the_property() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = crowdflux(&[
        "validate", "--suite", "vmf", "--fault", "bessel", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("vmf/flux_equals_bessel_ratio_times_direction"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("validation.json")).unwrap())
            .unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn unknown_suite_is_a_config_error() {
    assert_eq!(
        crowdflux(&["validate", "--suite", "nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn kernel_table_is_byte_identical_on_rerun_and_checks_out() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = crowdflux(&["kernels", "--out", a.to_str().unwrap(), "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        String::from_utf8_lossy(&o.stdout).matches("ok  ").count(),
        3
    );
    crowdflux(&["kernels", "--out", b.to_str().unwrap()]);
    let ta = fs::read(a.join("kernels.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("kernels.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 65);
}

#[test]
fn unknown_scenario_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_scenario(dir.path(), 0.1);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"noise\"", "\"speeed\"");
    fs::write(&path, text).unwrap();
    let o = crowdflux(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        "unused",
        "--level",
        "ibm",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("speeed"), "{}", stderr(&o));
}

#[test]
fn missing_kernel_table_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_scenario(dir.path(), 0.1);
    let out = dir.path().join("out");
    let o = crowdflux(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--level",
        "hydro",
        "--kernel-table",
        "/nonexistent/table.csv",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn every_level_runs_and_reports_a_balanced_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_scenario(dir.path(), 0.1);
    for (level, first) in [
        ("ibm", "snapshots.ndjson"),
        ("fluid-mono", "fields_0000.csv"),
        ("fluid-vmf", "fields_0000.csv"),
        ("hydro", "hydro_0000.csv"),
    ] {
        let out = dir.path().join(level);
        let o = crowdflux(&[
            "run",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--level",
            level,
            "--force-mode",
            "meanfield-average",
        ]);
        assert_eq!(o.status.code(), Some(0), "{level}: {}", stderr(&o));
        assert!(out.join(first).exists(), "{level}");
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["level"], level);
        for l in report["mass_ledger"].as_array().unwrap() {
            let f = |k: &str| l[k].as_f64().unwrap();
            let imbalance = f("initial") - f("outflow") - f("repaired") - f("current");
            assert!(imbalance.abs() <= 1e-9 * f("initial"), "{level}: {l}");
        }
        if level != "ibm" {
            assert_eq!(report["outputs"].as_array().unwrap().len(), 3, "{level}");
        }
    }
}

#[test]
fn seeded_particle_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_scenario(dir.path(), 0.2);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = crowdflux(&[
            "run",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--level",
            "ibm",
            "--seed",
            seed,
            "--threads",
            "2",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read(out.join("snapshots.ndjson")).unwrap()
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
}

#[test]
fn hydro_front_scenario_moves_at_the_bessel_speed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("front");
    let scenario = scenarios().join("hydro_front.json");
    let o = crowdflux(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--level",
        "hydro",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("hydro_0002.csv")).unwrap();
    let row: Vec<(f64, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[3])
        })
        .filter(|&(_, y, _)| (y - 1.5).abs() < 1e-9)
        .collect();
    let cross = row
        .windows(2)
        .find(|w| w[0].2 >= 0.5 && w[1].2 < 0.5)
        .map(|w| w[0].0 + (w[0].2 - 0.5) / (w[0].2 - w[1].2))
        .unwrap();
    // kappa = 0.2 / 0.1 = 2, I1(2)/I0(2) = 0.697775
    let exact = 16.0 + 1.34 * 0.697_774_657_964_008 * 10.0;
    assert!((cross - exact).abs() < 1.0, "{cross} vs {exact}");
}
