use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nhim(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nhim"));
    c.args(args).env_remove("NHIM_OUT");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn cohomological_solve_matches_the_analytic_graph() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), "c.toml", "scenario = \"cohomological\"\nnx = 128\nmethods = [\"perron\"]\n[perron]\ntol = 1e-8\n");
    let out = t.path().join("out");
    let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&out.join("graph_perron.csv"));
    assert_eq!(rows.len(), 128);
    for r in rows {
        let (x, h): (f64, f64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        assert!((h - (0.04 * x.sin() - 0.02 * x.cos())).abs() < 1e-5);
        // 17 significant digits
        assert_eq!(r[1].split('e').next().unwrap().trim_start_matches('-').replace('.', "").len(), 17);
    }
    let m = json(&out.join("run.json"));
    assert_eq!(m["verdict"], "reproduced");
    assert_eq!(m["config"]["scenario"], "cohomological");
}

#[test]
fn breakdown_exits_with_two() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), "b.toml", "scenario = \"breakdown\"\nmethods = [\"perron\"]\n[params]\nlambda_y = -1.0\n");
    let out = t.path().join("out");
    let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("detected:"), "{text}");
    let m = json(&out.join("run.json"));
    assert_eq!(m["verdict"], "diverged-as-expected");
    assert_eq!(m["divergence_detected"], true);
}

#[test]
fn malformed_configs_exit_64_naming_the_key() {
    let t = tempfile::tempdir().unwrap();
    for (body, key) in [
        ("scenario = \"cohomological\"\n[perron]\ntoll = 1e-8\n", "toll"),
        ("scenario = \"cohomological\"\nnx = \"many\"\n", "nx"),
        ("scenario = \"cohomological\"\norder = 7\n", "order"),
        ("scenario = \"nosuch\"\n", "nosuch"),
        ("scenario = \"cohomological\"\n[params]\nepsilon = 0.1\n", "epsilon"),
    ] {
        let cfg = config(t.path(), "bad.toml", body);
        let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&t.path().join("o"))], &[]);
        assert_eq!(o.status.code(), Some(64), "{body}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(key), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = nhim(&["solve", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn solver_failure_exits_with_one() {
    let t = tempfile::tempdir().unwrap();
    // backward orbits leave the window, which aborts the solve
    let cfg = config(t.path(), "f.toml", "methods = [\"perron\"]\n[system]\nvx = \"-x\"\nvy = [\"-3*y1 + 0.1*x\"]\ndomain = { window = [-1.0, 1.0] }\n");
    let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&t.path().join("o"))], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn nhim_out_overrides_out_and_manifests_replay_bit_identically() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), "c.toml", "scenario = \"cohomological\"\nnx = 64\n[params]\neps = 0.2\n");
    let env_out = t.path().join("env");
    let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&t.path().join("flag"))], &[("NHIM_OUT", &env_out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(env_out.join("run.json").exists() && !t.path().join("flag").exists());
    let replay = t.path().join("replay");
    let o = nhim(&["--jobs", "2", "solve", "--config", s(&env_out.join("run.json")), "--out", s(&replay)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["graph_perron.csv", "graph_graph-transform.csv"] {
        assert_eq!(std::fs::read(env_out.join(f)).unwrap(), std::fs::read(replay.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_file() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), "c.toml", "scenario = \"cohomological\"\nnx = 32\n");
    let out = t.path().join("o");
    let o = nhim(&["solve", "--config", s(&cfg), "--out", s(&out), "--method", "perron", "--order", "2", "--tol", "1e-9"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("run.json"));
    assert_eq!(m["config"]["methods"], serde_json::json!(["perron"]));
    assert_eq!(m["config"]["perron"]["tol"], 1e-9);
    assert!(!out.join("graph_graph-transform.csv").exists());
    // derivative columns are present at order 2
    let head = std::fs::read_to_string(out.join("graph_perron.csv")).unwrap();
    assert!(head.starts_with("x,h0,d1_0,d2_0,"));
}

fn diagnose(dir: &Path, body: &str) -> serde_json::Value {
    let cfg = config(dir, "d.toml", body);
    let out = dir.join("d");
    let o = nhim(&["diagnose", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    json(&out.join("diagnose.json"))
}

#[test]
fn diagnose_reports_rates() {
    let t = tempfile::tempdir().unwrap();
    let lin = diagnose(t.path(), "[system]\nvx = \"-0.5*x\"\nvy = [\"-2*y1\"]\ndomain = { window = [-1.0, 1.0] }\n");
    assert!((lin["rho_m_hat"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert!((lin["rho_y_hat"].as_f64().unwrap() + 2.0).abs() < 1e-6);
    let os = diagnose(t.path(), "scenario = \"opt-smooth\"\n");
    let r = os["max_r_measured"].as_f64().unwrap();
    assert!(r <= 2.5 + 1e-6 && r > 2.4, "{r}");
    assert_eq!(os["certified_order"], 2);
    let cy = diagnose(t.path(), "scenario = \"cylinder\"\n");
    assert!((cy["rho_y_hat"].as_f64().unwrap() + 1.0).abs() < 1e-3);
    let rx = cy["rho_x_hat"].as_f64().unwrap();
    assert!(rx < 0.0 && rx > -2e-3, "{rx}");
}

fn sweep_rows(dir: &Path, body: &str) -> Vec<Vec<String>> {
    let cfg = config(dir, "s.toml", body);
    let out = dir.join("s");
    let o = nhim(&["sweep", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    csv(&out.join("summary.csv"))
}

#[test]
fn cohomological_sweep_is_linear_in_eps() {
    let t = tempfile::tempdir().unwrap();
    let rows = sweep_rows(
        t.path(),
        "scenario = \"cohomological\"\nmethods = [\"perron\"]\nnx = 64\n[sweep]\nparam = \"eps\"\nvalues = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05]\n",
    );
    let eps: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let sup: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(sup[0], 0.0);
    let slope = sup[5] / eps[5];
    for (e, v) in eps.iter().zip(&sup) {
        assert!((v - slope * e).abs() < 1e-6);
    }
    // no jump exceeds ten times its neighbouring differences
    let d: Vec<f64> = sup.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    for i in 1..d.len() - 1 {
        assert!(d[i] <= 10.0 * d[i - 1].min(d[i + 1]));
    }
    assert!(t.path().join("s/eps=0.03/graph_perron.csv").exists());
}

#[test]
fn opt_smooth_sweep_tracks_the_ratio() {
    let t = tempfile::tempdir().unwrap();
    let rows = sweep_rows(t.path(), "scenario = \"opt-smooth\"\nmethods = [\"perron\"]\n[sweep]\nparam = \"lambda_y\"\nvalues = [-1.5, -2.25, -2.75]\n");
    for r in rows {
        let ly: f64 = r[1].parse().unwrap();
        let alpha: f64 = r[4].parse().unwrap();
        let k: f64 = r[5].parse().unwrap();
        assert!((alpha + k - (-ly)).abs() <= 0.1, "{r:?}");
        assert_eq!(r[6], "reproduced");
    }
}

#[test]
fn list_scenarios_names_the_catalog() {
    let o = nhim(&["list-scenarios"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for n in ["opt-smooth", "breakdown", "non-cinfty", "cylinder", "collapse", "cohomological"] {
        assert!(text.contains(n));
    }
}
