use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "nx = 16\nny = 8\nnz = 1\nLx = 2\nLy = 1\nsymmetry = false\n";

fn hxtopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hxtopo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_case(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hxtopo(&[]).status.code(), Some(1));
    assert_eq!(hxtopo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hxtopo(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = write_case(dir.path(), "bad.cfg", "Re1 = -5\n");
    let o = hxtopo(&["reference", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Re1"));

    let missing = dir.path().join("nope.cfg");
    assert_eq!(hxtopo(&["optimize", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn optimize_writes_history_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_case(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run1");
    let o = hxtopo(&["optimize", &cfg, "--out", out.to_str().unwrap(), "--max-iters", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("step,J,J1,J2,Vdot1,Vdot2,Tout1,Tout2"));
    let vtk = fs::read_to_string(out.join("final.vtk")).unwrap();
    assert!(vtk.contains("DIMENSIONS 16 8 1"));

    // Re-analysing the exported field twice gives the same report.
    let final_vtk = out.join("final.vtk");
    let a = hxtopo(&["analyze", final_vtk.to_str().unwrap(), &cfg]);
    let b = hxtopo(&["analyze", final_vtk.to_str().unwrap(), &cfg]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("J = "));

    let p = hxtopo(&["analyze", final_vtk.to_str().unwrap(), &cfg, "--project", "beta=8"]);
    assert_eq!(p.status.code(), Some(0));
    assert!(stdout(&p).contains("beta=8"));
    assert_eq!(
        hxtopo(&["analyze", final_vtk.to_str().unwrap(), &cfg, "--project", "gamma=3"]).status.code(),
        Some(1)
    );

    // A design from a different grid is rejected.
    let other = write_case(dir.path(), "other.cfg", &SMALL.replace("nx = 16", "nx = 20"));
    assert_eq!(hxtopo(&["analyze", final_vtk.to_str().unwrap(), &other]).status.code(), Some(1));
}

#[test]
fn reference_and_its_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_case(dir.path(), "small.cfg", SMALL);
    let o = hxtopo(&["reference", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("reference: J = "));

    let u = write_case(dir.path(), "u.cfg", &format!("{SMALL}arrangement = u-counter\n"));
    assert_eq!(hxtopo(&["reference", &u]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_a_small_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_case(dir.path(), "small.cfg", SMALL);
    let o = hxtopo(&["gradcheck", &cfg, "--probes", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn sweep_tabulates_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_case(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("sweep");
    let o = hxtopo(&[
        "sweep",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--presets",
        "re50,reference",
        "--max-iters",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("re50 ")));
    assert!(table.lines().any(|l| l.starts_with("reference ")));
    assert!(out.join("re50/history.csv").exists());
    assert!(out.join("reference/reference.vtk").exists());
    assert_eq!(hxtopo(&["sweep", &cfg, "--presets", "nonsense"]).status.code(), Some(1));
}
