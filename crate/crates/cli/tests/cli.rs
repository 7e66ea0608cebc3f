use std::path::Path;
use std::process::{Command, Output};

fn molfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molfield")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = molfield(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn xyz_blocks(text: &str) -> usize {
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    let mut n = 0;
    while i < lines.len() {
        let atoms: usize = lines[i].trim().parse().unwrap();
        i += atoms + 2;
        n += 1;
    }
    n
}

#[test]
fn synth_writes_one_block_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "7", "--atoms", "5", "--frames", "8", "--out", "traj.xyz"]);
    let text = std::fs::read_to_string(dir.path().join("traj.xyz")).unwrap();
    assert_eq!(xyz_blocks(&text), 8);
    assert!(text.lines().next().unwrap().trim() == "5");
}

#[test]
fn invariance_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["invariance", "--trials", "100"]);
    assert!(out.lines().any(|l| l == "max_frame_equivariance_err < 1e-6"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("invariance.csv")).unwrap();
    assert!(csv.starts_with("check,value\n"));
}

#[test]
fn zero_learning_rate_checkpoint_matches_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "3", "--atoms", "3", "--frames", "2", "--out", "traj.xyz"]);
    ok(d, &["train", "--task", "dynamics", "--preset", "desk", "--data", "traj.xyz", "--epochs", "1", "--lr", "0", "--checkpoint", "a.ckpt"]);
    ok(d, &["train", "--task", "dynamics", "--preset", "desk", "--data", "traj.xyz", "--epochs", "0", "--checkpoint", "b.ckpt"]);
    let a = std::fs::read(d.join("a.ckpt")).unwrap();
    let b = std::fs::read(d.join("b.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# synthetic data\nseed = 4\natoms = 3\nframes = 5\nout = cfg.xyz\n").unwrap();
    ok(d, &["--config", "run.cfg", "synth"]);
    assert_eq!(xyz_blocks(&std::fs::read_to_string(d.join("cfg.xyz")).unwrap()), 5);
    ok(d, &["--config", "run.cfg", "synth", "--frames", "2"]);
    assert_eq!(xyz_blocks(&std::fs::read_to_string(d.join("cfg.xyz")).unwrap()), 2);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["frobnicate"],
        vec!["synth", "--bogus"],
        vec!["--config", "missing.cfg", "synth"],
        vec!["train", "--task", "dynamics"],
        vec!["train", "--task", "swimming", "--data", "x.xyz"],
        vec!["eval", "--checkpoint", "nope.ckpt", "--data", "x.xyz"],
    ] {
        let out = molfield(d, &args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}

#[test]
fn gradcheck_reports_every_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.starts_with("gradcheck: max_rel_err="), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let tasks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tasks, ["dynamics", "property", "generation"]);
}
