use std::path::Path;
use std::process::{Command, Output};

fn polymer2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polymer2d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn kernels_writes_header_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "k.cfg",
        "experiment = kernels\nkernels.n_max = 500\n",
    );
    let out = dir.path().join("out");
    let o = polymer2d(&[
        "run",
        "kernels",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("kernels.csv")).unwrap();
    let mut lines = csv.lines();
    let stamp = lines.next().unwrap();
    assert!(stamp.starts_with("# polymer2d kernels config_digest="));
    assert!(stamp.contains("seed=0"));
    assert_eq!(lines.next(), Some("n,u_n,R_n"));
    assert_eq!(lines.count(), 501);
    let plot = std::fs::read_to_string(out.join("kernels.plot")).unwrap();
    assert!(plot.contains("'kernels.csv'"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("kernels.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    assert_eq!(json["name"], "kernels");
}

#[test]
fn unknown_experiment_lists_catalog() {
    let o = polymer2d(&["run", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decay-vs-theta"));
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.cfg",
        "experiment = tv-identity\ncalibration.n = 64\ncalibration.theta = 1\nreplicas = 200\n",
    );
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        let o = polymer2d(&[
            "run",
            "tv-identity",
            "--config",
            &cfg,
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
        std::fs::read(out.join("tv-identity.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn seed_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "k.cfg",
        "experiment = kernels\nkernels.n_max = 10\n",
    );
    let first_line = |seed: &str| {
        let out = dir.path().join(seed);
        polymer2d(&[
            "run",
            "kernels",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        let csv = std::fs::read_to_string(out.join("kernels.csv")).unwrap();
        csv.lines().next().unwrap().to_string()
    };
    assert_ne!(first_line("1"), first_line("2"));
}

#[test]
fn list_has_twelve_entries() {
    let o = polymer2d(&["list"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 12);
    assert!(s.contains("decay-vs-theta"));
    assert!(s.contains("skeleton-q"));
}

#[test]
fn validate_rejects_theta_beyond_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.cfg",
        "experiment = finite-volume\ncalibration.n = 64\ncalibration.theta = 50\n",
    );
    let o = polymer2d(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("calibration out of range"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn validate_rejects_both_beta_and_theta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.cfg",
        "experiment = free-energy\ncalibration.beta = 0.5\ncalibration.theta = 1\n",
    );
    let o = polymer2d(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("exactly one of"));
}

#[test]
fn validate_accepts_minimal_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "v.cfg", "experiment = kernels\n");
    let o = polymer2d(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn validate_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.cfg",
        "experiment = kernels\nkernels.nmax = 10\n",
    );
    let o = polymer2d(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("kernels.nmax"));
}

#[test]
fn invalid_config_on_run_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.cfg",
        "experiment = stretches\nreplicas = 10\n",
    );
    let o = polymer2d(&["run", "stretches", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
}
