use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gexp_cli::config::ExperimentConfig;

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn gexp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gexp")).args(args).output().expect("spawn gexp")
}

fn run(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = example(config);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    gexp(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bundled_configs_round_trip() {
    for entry in std::fs::read_dir(example("")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        let v1 = serde_json::to_value(&cfg).unwrap();
        let v2 = serde_json::to_value(&again).unwrap();
        assert_eq!(v1, v2);
    }
}

#[test]
fn price_bt2_is_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("price", "bt2.json", dir.path(), &["--refine", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("4.000000"));
    let r = json(dir.path().join("price.json"));
    assert!((r["dp"].as_f64().unwrap() - 4.0).abs() <= 1e-3);
    assert!((r["pde"].as_f64().unwrap() - 4.0).abs() <= 1e-3);
    assert_eq!(r["ladder"].as_array().unwrap().len(), 2);
}

#[test]
fn price_linear_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("price", "linear.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let r = json(dir.path().join("price.json"));
    assert!(r["dp"].as_f64().unwrap().abs() <= 1e-10);
    assert!(r["pde"].as_f64().unwrap().abs() <= 1e-10);
}

#[test]
fn price_call_matches_heat_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("price", "call.json", dir.path(), &["--refine", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = json(dir.path().join("price.json"));
    // E[(s xi)^+] = s / sqrt(2 pi) with s^2 = a_high T = 4
    let exact = 2.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!((r["expected"].as_f64().unwrap() - exact).abs() < 1e-14);
    assert!((r["dp"].as_f64().unwrap() - exact).abs() <= 1e-2);
    assert!((r["pde"].as_f64().unwrap() - exact).abs() <= 1e-3);
    let errs: Vec<f64> = r["ladder"].as_array().unwrap().iter().map(|x| x["error"].as_f64().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn verify_bt2_all_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("verify", "bt2.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = json(dir.path().join("verify.json"));
    assert_eq!(r["pass"], true);
    for key in ["price", "bsde", "hedge"] {
        assert_eq!(r[key]["pass"], true, "{key}");
    }
    assert_eq!(r["replicability"]["consistent"], true);
    assert_eq!(r["replicability"]["classification"]["kind"], "not_replicable");
    let gap = r["replicability"]["symmetry"]["gap"].as_f64().unwrap();
    assert!((gap - 3.0).abs() <= 0.15);
}

#[test]
fn same_seed_gives_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert_eq!(run("hedge", "call.json", a.path(), &["--seed", "21"]).status.code(), Some(0));
    assert_eq!(run("hedge", "call.json", b.path(), &["--seed", "21", "--sequential"]).status.code(), Some(0));
    assert_eq!(run("hedge", "call.json", c.path(), &["--seed", "22"]).status.code(), Some(0));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["hedge.json", "shortfall.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_ne!(read(a.path(), "hedge.json"), read(c.path(), "hedge.json"));
}

#[test]
fn decompose_writes_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("decompose", "bt2.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("decomposition.csv")).unwrap();
    assert!(csv.starts_with("control,path_id,t,B,E,Z,K"));
    assert!(csv.lines().count() > 201);
    let r = json(dir.path().join("bsde.json"));
    assert_eq!(r["checks"]["pass"], true);
    assert!((r["decomposition"]["e0"].as_f64().unwrap() - 4.0).abs() < 1e-9);
}

#[test]
fn paste_out_of_bounds_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("paste", "paste_outside.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("containment violated"));
    let ok = run("paste", "paste_inside.json", dir.path(), &[]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
}

#[test]
fn integrate_table_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("integrate", "integrate.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = json(dir.path().join("integrate.json"));
    let errs: Vec<f64> = r["rows"].as_array().unwrap().iter().map(|x| x["mean_abs_error"].as_f64().unwrap()).collect();
    assert_eq!(errs.len(), 3);
    assert!(errs[0] > errs[1] && errs[1] > errs[2]);
}

#[test]
fn run_executes_listed_operations() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("run", "linear.json", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(dir.path().join("price.json").exists());
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("cfl.json");
    std::fs::write(
        &bad,
        r#"{"name": "cfl", "scenario": {"kind": "interval_bounds", "a_low": 1.0, "a_high": 4.0},
            "claim": {"payoff": {"kind": "square"}},
            "grid": {"horizon": 1.0, "steps": 50, "nx": 201, "x_min": -5.0, "x_max": 5.0, "pde_steps": 10}}"#,
    )
    .unwrap();
    let o = gexp(&["price", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt <= dx^2 / a_high"));

    let missing = gexp(&["price", "--config", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(gexp(&["price"]).status.code(), Some(2));
    assert_eq!(gexp(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn acceptance_subset_passes() {
    let o = gexp(&["acceptance", "--only", "4,6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let s = stdout(&o);
    assert!(s.contains("[PASS]  4.") && s.contains("[PASS]  6."));
}
