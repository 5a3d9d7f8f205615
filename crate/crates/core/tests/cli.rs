use std::path::Path;
use std::process::{Command, Output};

const SHORT: &str = r#"
name = "short"

[demand]
breakpoints = [[0.0, 1500.0], [120.0, 0.0]]
"#;

fn jadlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jadlab")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn simulate(scenario: &str, mode: &str, out: &Path) -> Output {
    jadlab(&["simulate", "--scenario", scenario, "--mode", mode, "--seed", "3", "--out", out.to_str().unwrap()])
}

#[test]
fn simulate_compare_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write(tmp.path(), "short.toml", SHORT);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = simulate(&scenario, "no-jad", dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["config.toml", "trajectory.csv", "detectors.csv", "vehicles.csv", "metrics.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }

    let report = tmp.path().join("cmp.json");
    let out = jadlab(&["compare", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["delta_att"], 0.0);
    assert_eq!(json["deterioration_flag"], false);

    let out = jadlab(&["export-timespace", "--run", a.to_str().unwrap(), "--dt", "60", "--dp", "500"]);
    assert!(out.status.success());
    let grid = std::fs::read_to_string(a.join("timespace.csv")).unwrap();
    assert!(grid.starts_with("t_start_s,p_start_m,mean_speed_mps,samples"));
    assert_eq!((grid.lines().count() - 1) % 20, 0);
    assert!(a.join("abv_trajectory.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let no_demand = write(tmp.path(), "a.toml", "name = \"x\"\n");
    let out = simulate(&no_demand, "no-jad", &tmp.path().join("a"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("demand"));

    let cfl = format!("{SHORT}\n[ctm.initial_theta]\nv_fr_mps = 40.0\nrho_cr_nor_veh_per_km = 23.0\nrho_cr_sag_veh_per_km = 18.0\n");
    let bad = write(tmp.path(), "b.toml", &cfl);
    assert_eq!(simulate(&bad, "jad-da", &tmp.path().join("b")).status.code(), Some(2));

    let out = jadlab(&["simulate", "--scenario", &bad, "--mode", "sideways", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn filter_fault_exits_4_and_leaves_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SHORT}\n[filter]\np0_density_veh2_per_km2 = 1e308\n");
    let scenario = write(tmp.path(), "f.toml", &text);
    let dir = tmp.path().join("f");
    let out = simulate(&scenario, "jad-da", &dir);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.join("error.txt").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["status"].as_str().unwrap().starts_with("aborted"));
}

#[test]
fn mismatched_runs_do_not_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.toml", SHORT);
    let b = write(tmp.path(), "b.toml", &SHORT.replace("1500.0", "1400.0"));
    simulate(&a, "no-jad", &tmp.path().join("a"));
    simulate(&b, "no-jad", &tmp.path().join("b"));
    let out = jadlab(&[
        "compare",
        "--a",
        tmp.path().join("a").to_str().unwrap(),
        "--b",
        tmp.path().join("b").to_str().unwrap(),
        "--out",
        tmp.path().join("c.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
