use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinlayer"))
        .args(args)
        .env("THINLAYER_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn all_text(dir: &Path) -> String {
    let mut s = String::new();
    for e in walk(dir) {
        if let Ok(t) = std::fs::read_to_string(&e) {
            s += &t;
        }
    }
    s
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn help_lists_every_key_with_unit_and_default() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["geometry.width", "transform.amplitude", "transform.ramp_time", "problem.d_layer", "numerics.eps", "numerics.dt", "numerics.T", "output.timings"] {
        assert!(text.contains(key), "missing {key}");
    }
    assert!(text.contains("numerics.dt [time] default 0.01"));
    assert!(text.contains("numerics.eps [-] default [0.25, 0.125]"));
}

#[test]
fn converge_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "converge",
        "-o",
        out.to_str().unwrap(),
        "numerics.resolution=2",
        "numerics.dt=0.05",
        "numerics.T=0.1",
        "output.timings=false",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("rates.csv").exists());
    assert!(stdout(&o).contains("report written to"));
}

#[test]
fn invalid_eps_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[numerics]\neps = [0.3]\n");
    let o = run(&["converge", "-c", &cfg, "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eps"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = run(&["mesh", "-c", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_is_rejected() {
    let o = run(&["mesh", "numerics.foo=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("numerics.foo"));
}

#[test]
fn override_takes_precedence_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[numerics]\neps = [0.5]\nresolution = 2\ndt = 0.01\nT = 0.02\n[transform]\nkind = \"static\"\n[output]\nevery = 1\n",
    );
    let out = dir.path().join("out");
    let o = run(&["run-micro", "-c", &cfg, "-o", out.to_str().unwrap(), "numerics.dt=0.005"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = all_text(&out);
    assert!(text.contains("0.005"), "no snapshot at t = 0.005");
    assert!(text.contains("0.015"));
}

#[test]
fn folding_transform_is_flagged_not_fatal() {
    let o = run(&["check-transform", "transform.amplitude=1.2", "transform.ramp_time=0", "numerics.eps=[0.5]"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("FLAG"), "{}", stdout(&o));
}

#[test]
fn static_transform_has_no_flags() {
    let o = run(&["check-transform", "transform.kind=static"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no audit flags"));
}

#[test]
fn mesh_reports_vertex_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mesh", "-o", dir.path().to_str().unwrap(), "numerics.eps=[0.5]", "numerics.resolution=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("cell.mesh:"));
}
