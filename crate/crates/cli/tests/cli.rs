use std::path::Path;
use std::process::{Command, Output};

fn hjkam(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjkam"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("HJKAM_JOBS")
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_s_free_model_gives_half() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("free.json");
    std::fs::write(&model, r#"{"family": "free", "d": 1}"#).unwrap();
    let out = hjkam(&["gen-s", "--model", model.to_str().unwrap(), "--t", "1", "--q0", "0", "--q1", "1", "--sigma", "1", "--p-max", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("gen_s.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau,t,q0,q1,S,rho0,rho1"));
    let s: f64 = lines.next().unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!((s - 0.5).abs() < 1e-12, "S = {s}");
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("meta.json"))).unwrap();
    assert_eq!(meta["command"], "gen-s");
    assert_eq!(meta["model_sha256"].as_str().unwrap().len(), 64);
    assert!(meta["tolerances"]["tol_wk"].is_number());
    assert!(meta["sigma"]["value"].is_number());
}

#[test]
fn check_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = hjkam(&["check", "--model", "pendulum", "--samples", "200"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&read(&dir.path().join("summary.json"))).unwrap();
    for key in ["h1", "h2", "h3", "m_emp", "M_emp"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("run.log").exists());
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, "{\n  \"seed\": 3,\n  \"grid_size\": 64\n}\n").unwrap();
    let out = hjkam(&["check", "--model", "free", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("grid_size") && err.contains("line 3"), "{err}");
}

#[test]
fn solver_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // a horizon past the declared window is refused by the generating function
    let out = hjkam(&["gen-s", "--model", "pendulum", "--t", "1", "--q0", "0", "--q1", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seeded_alpha_run_is_byte_identical() {
    let runs: Vec<(String, String)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let args = ["alpha", "--model", "pendulum", "--grid", "32", "--sigma", "0.2", "--p-max", "4", "--seed", "7"];
            let out = hjkam(&args, dir.path());
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            (read(&dir.path().join("summary.json")), read(&dir.path().join("meta.json")))
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let summary: serde_json::Value = serde_json::from_str(&runs[0].0).unwrap();
    assert!((summary["alpha"].as_f64().unwrap() - 1.0).abs() < 1e-2);
}

#[test]
fn lax_exports_grid_function() {
    let dir = tempfile::tempdir().unwrap();
    let out = hjkam(&["lax", "--model", "free", "--grid", "16", "--t", "0.1", "--initial", "zero"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header: serde_json::Value = serde_json::from_str(&read(&dir.path().join("result.json"))).unwrap();
    assert_eq!(header["d"], 1);
    assert_eq!(header["n_per_dim"], 16);
    let csv = read(&dir.path().join("result.csv"));
    assert_eq!(csv.lines().count(), 16);
    for line in csv.lines() {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn help_exits_zero_and_bad_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hjkam(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(hjkam(&["alpha", "--no-such-flag"], dir.path()).status.code(), Some(1));
}
