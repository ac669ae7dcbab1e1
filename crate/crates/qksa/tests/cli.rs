use std::path::Path;
use std::process::Command;

fn qksa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qksa"))
}

fn write_run_files(dir: &Path) {
    std::fs::write(dir.join("env.circ"), "qubits 1\nh 0\n").unwrap();
    std::fs::write(
        dir.join("exp.conf"),
        "[run]\n\
         total_step_budget = 6\n\
         seed = 2\n\
         \n\
         [environment]\n\
         source = circuit\n\
         circuit = env.circ\n\
         \n\
         [pool]\n\
         qpt = qpt0 5 32\n\
         \n\
         [genome]\n\
         k_r = -inf\n\
         k_d = -inf\n\
         max_steps = 40\n\
         trigger_window = 1\n",
    )
    .unwrap();
}

#[test]
fn validate_reports_the_resolved_shape() {
    let dir = tempfile::tempdir().unwrap();
    write_run_files(dir.path());
    let out = qksa().arg("validate").arg(dir.path().join("exp.conf")).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("ok: 1 repetition(s), 1 strategy pool entry"));
}

#[test]
fn config_errors_exit_one_with_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    write_run_files(dir.path());
    let mut body = std::fs::read_to_string(dir.path().join("exp.conf")).unwrap();
    body.push_str("mood = blue\n");
    std::fs::write(dir.path().join("exp.conf"), body).unwrap();

    let out = qksa().arg("validate").arg(dir.path().join("exp.conf")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: "));
    assert!(stderr.contains("mood"));
}

#[test]
fn missing_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = qksa().arg("run").arg(dir.path().join("ghost.conf")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_without_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = qksa().arg("report").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("no manifest"));
}

#[test]
fn run_writes_the_run_directory_and_reports_it() {
    let dir = tempfile::tempdir().unwrap();
    write_run_files(dir.path());
    let out_dir = dir.path().join("out");
    let out = qksa()
        .arg("run")
        .arg(dir.path().join("exp.conf"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("run complete:"));
    assert!(stdout.contains("1 agent(s), 6 step(s)"));
    assert!(out_dir.join("manifest.txt").is_file());
    assert!(out_dir.join("config.resolved").is_file());
    assert!(out_dir.join("environment.circ").is_file());
    assert!(out_dir.join("agents").join("a0.csv").is_file());

    let report = qksa().arg("report").arg(&out_dir).output().unwrap();
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("a0 gen 0 active steps 6"));
}

#[test]
fn relative_output_paths_land_under_the_run_dir_root() {
    let dir = tempfile::tempdir().unwrap();
    write_run_files(dir.path());
    let out = qksa()
        .arg("run")
        .arg(dir.path().join("exp.conf"))
        .arg("--out")
        .arg("nested/run")
        .env("QKSA_RUN_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("nested").join("run").join("manifest.txt").is_file());
}
