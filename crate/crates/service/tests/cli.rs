use std::process::Command;

fn vbiopsy(root: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vbiopsy"))
        .arg("--storage-root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn stages_run_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = vbiopsy(dir.path(), &["--set", "data.cohort.n=12", "phantom-gen", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["command"], "phantom-gen");
    assert_eq!(rec["summary"]["cases"], 12);
    assert_eq!(rec["inputs"]["seed"], "5");

    // preprocessing under a different cohort config refuses the stale dataset
    let out = vbiopsy(dir.path(), &["--set", "data.cohort.n=12", "preprocess"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    let out = vbiopsy(dir.path(), &["--set", "data.cohort.n=12", "--set", "data.cohort.seed=5", "preprocess"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = vbiopsy(dir.path(), &["--set", "data.cohort.n=12", "--set", "data.cohort.seed=5", "train-vaegan"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-clf"));
    let out = vbiopsy(dir.path(), &["--set", "no.such.key=1", "preprocess"]);
    assert!(!out.status.success());
}
