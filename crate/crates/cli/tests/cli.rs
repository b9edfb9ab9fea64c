use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn tiny_config() -> Value {
    json!({
        "physical": { "eta": 0.35 },
        "controller": {},
        "target": { "theta": 1.5707963267948966, "phi": 1.5707963267948966 },
        "sim": {
            "dt": 5e-9,
            "duration": 2e-6,
            "n_trajectories": 64,
            "seed": 3,
            "sample_interval": 0.5e-6,
            "sweep": {
                "gain_points": 3,
                "alpha_points": 4,
                "gain_ratios": [1.0],
                "beta_points": 4,
                "theta_points": 3,
                "gfm_scan_points": 3,
                "gfm_max_evaluations": 5
            }
        }
    })
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_qfbsim"))
            .arg(sub)
            .arg("--config")
            .arg(self.path("cfg.json"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }
}

fn meta(out: &Path) -> Value {
    let mut p = out.as_os_str().to_os_string();
    p.push(".meta.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_writes_csv_and_sidecar() {
    let r = Run::new(&tiny_config());
    let o = r.run("simulate", "a.csv", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(r.path("a.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "# t [s],mean_x [1],mean_y [1],mean_z [1],sem_x [1],sem_y [1],sem_z [1],fidelity [1]"
    );
    assert_eq!(lines.next().unwrap(), "t,mean_x,mean_y,mean_z,sem_x,sem_y,sem_z,fidelity");
    assert_eq!(lines.count(), 5);
    let m = meta(&r.path("a.csv"));
    assert_eq!(m["experiment"], "simulate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["config"]["sim"]["n_trajectories"], 64);
    assert_eq!(m["config"]["physical"]["gamma1"], 1.0 / 4.7e-6);
    assert!(m["controller"]["g_fm"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_are_byte_identical() {
    let r = Run::new(&tiny_config());
    assert!(r.run("sweep-beta", "a.csv", &["--set", "sim.sweep.optimize_gfm=false"]).status.success());
    assert!(r.run("sweep-beta", "b.csv", &["--set", "sim.sweep.optimize_gfm=false"]).status.success());
    let a = std::fs::read(r.path("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(r.path("b.csv")).unwrap());
    assert!(r.run("sweep-beta", "c.csv", &["--set", "sim.sweep.optimize_gfm=false", "--seed", "4"]).status.success());
    assert_ne!(a, std::fs::read(r.path("c.csv")).unwrap());
}

#[test]
fn flags_and_overrides_reach_the_config() {
    let r = Run::new(&tiny_config());
    let o = r.run(
        "simulate",
        "a.csv",
        &["--n", "10", "--dt", "4e-9", "--seed", "9", "--set", "physical.eta=0.5", "--set", "controller.fm_mode=exact"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = meta(&r.path("a.csv"));
    assert_eq!(m["config"]["sim"]["n_trajectories"], 10);
    assert_eq!(m["config"]["sim"]["dt"], 4e-9);
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["physical"]["eta"], 0.5);
    assert_eq!(m["controller"]["fm_mode"], "exact");
}

#[test]
fn every_subcommand_runs() {
    let r = Run::new(&tiny_config());
    for sub in [
        "simulate",
        "sweep-gain",
        "sweep-alpha",
        "sweep-beta",
        "sweep-theta",
        "transient",
        "optimize-gfm",
        "oracle-compare",
    ] {
        let o = r.run(sub, &format!("{sub}.csv"), &[]);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(r.path(&format!("{sub}.csv"))).unwrap();
        assert!(csv.starts_with("# "), "{sub}");
        assert!(csv.lines().count() > 2, "{sub}");
        assert_eq!(meta(&r.path(&format!("{sub}.csv")))["experiment"], sub);
    }
}

#[test]
fn config_errors_exit_1() {
    let mut unknown = tiny_config();
    unknown["physical"]["gamma_3"] = json!(1.0);
    let r = Run::new(&unknown);
    assert_eq!(r.run("simulate", "a.csv", &[]).status.code(), Some(1));
    assert!(!r.path("a.csv").exists());

    let r = Run::new(&tiny_config());
    for extra in [
        &["--set", "sim.nope=1"][..],
        &["--set", "physical.eta=1.5"],
        &["--set", "target.theta=4"],
        &["--set", "no_equals"],
        &["--set", "sim.sweep.beta_points=6"],
        &["--n", "1"],
    ] {
        let o = r.run("simulate", "a.csv", extra);
        assert_eq!(o.status.code(), Some(1), "{extra:?}");
        assert!(!o.stderr.is_empty());
    }

    let o = Command::new(env!("CARGO_BIN_EXE_qfbsim"))
        .args(["simulate", "--config", "/definitely/missing.json", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_2() {
    let mut c = tiny_config();
    c["physical"] = json!({ "eta": 1.0, "gamma_phi": 0.0, "gamma_m": 0.0 });
    c["sim"]["scheme"] = json!("euler");
    c["sim"]["markovian_limit"] = json!(true);
    c["sim"]["dt"] = json!(1e-7);
    c["sim"]["duration"] = json!(2e-5);
    let r = Run::new(&c);
    let o = r.run("simulate", "a.csv", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_failure_exits_3_and_success_exits_0() {
    let r = Run::new(&tiny_config());
    let o = r.run("sweep-gain", "a.csv", &["--check"]);
    assert_eq!(o.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL max_mean_z"), "{stdout}");
    // the table is still written
    assert!(r.path("a.csv").exists());
    assert_eq!(meta(&r.path("a.csv"))["checks"][0]["passed"], false);

    let o = r.run("oracle-compare", "b.csv", &["--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS controls_off"));
}
