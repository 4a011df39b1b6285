//! End-to-end CLI tests: drive the binary through the synth -> fit ->
//! evaluate -> estimate -> attribute -> report flow and pin the exit-code
//! contract (0 ok, 1 usage, 2 data, 3 tool/domain unavailable).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_encenergy"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should run")
}

fn assert_code(output: &Output, expected: i32) {
    assert_eq!(
        output.status.code(),
        Some(expected),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn full_pipeline_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv").display().to_string();
    let model = dir.path().join("medium.json").display().to_string();

    let out = run(&[
        "--seed", "42", "synth", "--out", &data, "--sequences", "20",
        "--presets", "ultrafast,medium", "--crfs", "23,28",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("80 records"));

    let out = run(&["--dataset", &data, "fit", "--preset", "medium", "--out", &model]);
    assert_code(&out, 0);

    let out = run(&[
        "--dataset", &data, "--output-format", "csv", "--seed", "7",
        "evaluate", "--k", "5",
    ]);
    assert_code(&out, 0);
    let table = stdout(&out);
    assert!(table.contains("medium"), "missing medium row: {table}");
    assert!(table.contains("ultrafast"), "missing ultrafast row: {table}");

    let out = run(&["--model", &model, "estimate", "--profile", &fixture("cachegrind_full.out")]);
    assert_code(&out, 0);
    let estimate: f64 = stdout(&out).trim().parse().expect("estimate is a number");
    assert!(estimate.is_finite() && estimate >= 0.0);

    let out = run(&[
        "--model", &model, "--output-format", "csv",
        "attribute", "--profile", &fixture("cachegrind_full.out"),
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("in-loop"), "deblock_filter should be in-loop");

    let out = run(&[
        "--dataset", &data, "--output-format", "csv",
        "report", "--posterior-model", &model, "--crf", "23",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("medium,"));

    let out = run(&["--dataset", &data, "correlate"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("Ir"));
}

#[test]
fn usage_errors_exit_1() {
    // Missing required --dataset.
    assert_code(&run(&["evaluate"]), 1);
    // Unknown flag.
    assert_code(&run(&["--no-such-flag", "correlate"]), 1);
    // No subcommand.
    assert_code(&run(&[]), 1);
}

#[test]
fn data_errors_exit_2() {
    // Nonexistent dataset file.
    assert_code(&run(&["--dataset", "/nonexistent/data.csv", "correlate"]), 2);
    // Corrupted profile.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv").display().to_string();
    let model = dir.path().join("m.json").display().to_string();
    assert_code(&run(&["synth", "--out", &data, "--sequences", "15", "--presets", "medium", "--crfs", "23"]), 0);
    assert_code(&run(&["--dataset", &data, "fit", "--preset", "medium", "--out", &model]), 0);
    let out = run(&[
        "--model", &model,
        "estimate", "--profile", &fixture("corrupted/summary_mismatch.out"),
    ]);
    assert_code(&out, 2);
    // Refusing to overwrite without --force is a data error too.
    assert_code(&run(&["synth", "--out", &data, "--sequences", "15", "--presets", "medium", "--crfs", "23"]), 2);
}

#[test]
fn unavailable_domain_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("ENCENERGY_POWERCAP_ROOT", dir.path())
        .args(["measure", "--p-idle", "1.0", "true"])
        .output()
        .unwrap();
    assert_code(&out, 3);
}

#[test]
fn help_and_version_exit_0() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
}
