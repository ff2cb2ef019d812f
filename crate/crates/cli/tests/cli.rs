use std::path::{Path, PathBuf};
use std::process::Command;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/poisson_meanfield_small.toml")
}

fn run(args: &[&str], config: &Path, out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_mfrbsde"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn with_edit(from: &str, to: &str, dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(bundled()).unwrap().replacen(from, to, 1);
    let path = dir.join("edited.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn bundled_config_reruns_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["run", "--threads", "2"], &bundled(), &a).0, 0);
    assert_eq!(run(&["run"], &bundled(), &b).0, 0);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 7);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let oracle = std::fs::read_to_string(a.join("oracle.csv")).unwrap();
    assert!(oracle.trim_end().ends_with("true"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_edit("tol = 1e-10", "tol = 1e-10\ngamma3 = 0.1", dir.path());
    let (code, err) = run(&["picard"], &cfg, &dir.path().join("out"));
    assert_eq!(code, 2);
    assert!(err.contains("params.gamma3"), "{err}");
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("params.gamma3"));
}

#[test]
fn iteration_cap_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_edit("max_picard = 200", "max_picard = 2", dir.path());
    assert_eq!(run(&["picard"], &cfg, &dir.path().join("out")).0, 3);
}

#[test]
fn failed_probe_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_edit("c = 0.5", "c = 5.0", dir.path());
    let (code, _) = run(&["validate"], &cfg, &dir.path().join("out"));
    assert_eq!(code, 4);
    let table = std::fs::read_to_string(dir.path().join("out/validate.csv")).unwrap();
    assert!(table.contains("terminal_consistency,false"));
}
