//! End-to-end tests driving the `seglab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn seglab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seglab"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate(dir: &Path, spec: Option<&Path>, seed: u64, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut cmd = seglab();
    cmd.arg("generate")
        .arg("--seed")
        .arg(seed.to_string())
        .arg("--out")
        .arg(&out);
    if let Some(spec) = spec {
        cmd.arg("--spec").arg(spec);
    }
    assert_ok(&run(&mut cmd));
    out
}

fn tiny_scenario(dir: &Path) -> PathBuf {
    generate(dir, Some(&fixture("tiny.toml")), 7, "tiny.bin")
}

fn run_method(scenario: &Path, out: &Path, method: &str, extra: &[&str]) -> Output {
    let mut cmd = seglab();
    cmd.arg("run")
        .arg("--scenario")
        .arg(scenario)
        .arg("--method")
        .arg(method)
        .arg("--seeds")
        .arg("1,2")
        .arg("--epochs")
        .arg("3")
        .arg("--out")
        .arg(out);
    cmd.args(extra);
    run(&mut cmd)
}

#[test]
fn generate_writes_scenario_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), None, 7, "default.bin");
    let sc = seglab_core::io::read_scenario(&out).unwrap();
    assert_eq!(sc.spec.schedule, vec![4, 1, 1]);
    assert_eq!(sc.steps.len(), 3);
    let manifest = out.with_file_name("default.bin.manifest.json");
    let text = std::fs::read_to_string(manifest).unwrap();
    assert!(text.contains("\"sha256\""));
}

#[test]
fn generate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), Some(&fixture("tiny.toml")), 7, "a.bin");
    let b = generate(dir.path(), Some(&fixture("tiny.toml")), 7, "b.bin");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn generate_seed_changes_data_but_not_spec() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), Some(&fixture("tiny.toml")), 7, "a.bin");
    let b = generate(dir.path(), Some(&fixture("tiny.toml")), 8, "b.bin");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let sa = seglab_core::io::read_scenario(&a).unwrap();
    let sb = seglab_core::io::read_scenario(&b).unwrap();
    assert_eq!(sa.spec, sb.spec);
    assert_ne!(
        sa.steps[0].images[0].features,
        sb.steps[0].images[0].features
    );
}

#[test]
fn invalid_spec_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "total_classes = 3\nschedule = [2, 2]\n").unwrap();
    let out = run(seglab()
        .arg("generate")
        .arg("--spec")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x.bin")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_the_documented_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out_dir = dir.path().join("ft");
    let out = run_method(&sc, &out_dir, "ft", &["--svg"]);
    assert_ok(&out);

    assert!(out_dir.join("manifest.json").is_file());
    assert!(out_dir.join("aggregate.csv").is_file());
    for seed in [1, 2] {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        assert!(seed_dir.join("report.json").is_file());
        assert!(seed_dir.join("report.csv").is_file());
        assert!(seed_dir.join("miou.svg").is_file());
        assert!(seed_dir.join("checkpoints/step_000.ckpt").is_file());
        assert!(seed_dir.join("checkpoints/step_001.ckpt").is_file());
    }
    let aggregate = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    let medians: Vec<&str> = aggregate
        .lines()
        .filter(|l| l.starts_with("median,"))
        .collect();
    assert_eq!(medians.len(), 2);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run_method(&sc, &a, "cs2k", &[]));
    assert_ok(&run_method(&sc, &b, "cs2k", &[]));
    for file in [
        "aggregate.csv",
        "seed_1/report.json",
        "seed_1/report.csv",
        "seed_1/checkpoints/step_000.ckpt",
        "seed_1/checkpoints/step_001.ckpt",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn resume_reproduces_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out_dir = dir.path().join("run");
    assert_ok(&run_method(&sc, &out_dir, "cs2k", &[]));
    let report = out_dir.join("seed_1/report.json");
    let ckpt = out_dir.join("seed_1/checkpoints/step_001.ckpt");
    let before_report = std::fs::read(&report).unwrap();
    let before_ckpt = std::fs::read(&ckpt).unwrap();

    assert_ok(&run_method(&sc, &out_dir, "cs2k", &["--from-step", "1"]));
    assert_eq!(std::fs::read(&report).unwrap(), before_report);
    assert_eq!(std::fs::read(&ckpt).unwrap(), before_ckpt);
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out_dir = dir.path().join("run");
    assert_ok(&run_method(&sc, &out_dir, "cs2k", &[]));
    let out = run_method(&sc, &out_dir, "cs2k", &["--from-step", "1", "--lr", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cannot resume"), "stderr: {err}");
}

#[test]
fn resume_without_a_previous_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out = run_method(
        &sc,
        &dir.path().join("fresh"),
        "cs2k",
        &["--from-step", "1"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_outside_the_full_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out = run_method(&sc, &dir.path().join("x"), "ft", &["--ablate", "wsc"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let out = run_method(&sc, &dir.path().join("x"), "sota", &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_scenario_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_method(
        &dir.path().join("nope.bin"),
        &dir.path().join("x"),
        "ft",
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_scenario_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"JUNKJUNKJUNKJUNK").unwrap();
    let out = run_method(&bad, &dir.path().join("x"), "ft", &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn out_root_env_anchors_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir_all(&root).unwrap();
    let mut cmd = seglab();
    cmd.arg("generate")
        .arg("--out")
        .arg("nested/sc.bin")
        .env("SEGLAB_OUT_ROOT", &root)
        .current_dir(dir.path());
    assert_ok(&run(&mut cmd));
    assert!(root.join("nested/sc.bin").is_file());
    assert!(!dir.path().join("nested").exists());
}

#[test]
fn compare_prints_a_table_and_rejects_mismatched_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let other = generate(dir.path(), Some(&fixture("tiny.toml")), 99, "other.bin");
    let ft = dir.path().join("ft");
    let wf = dir.path().join("wf");
    let onother = dir.path().join("onother");
    assert_ok(&run_method(&sc, &ft, "ft", &[]));
    assert_ok(&run_method(&sc, &wf, "wf", &[]));
    assert_ok(&run_method(&other, &onother, "wf", &[]));

    let csv_path = dir.path().join("table.csv");
    let out = run(seglab()
        .arg("compare")
        .arg(&ft)
        .arg(&wf)
        .arg("--out")
        .arg(&csv_path));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("method"), "{stdout}");
    assert!(stdout.contains("wf"), "{stdout}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.lines().count() > 1 + 2, "{csv}");

    let out = run(seglab().arg("compare").arg(&ft).arg(&onother));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_of_a_run_with_itself_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let ft = dir.path().join("ft");
    assert_ok(&run_method(&sc, &ft, "ft", &[]));
    let csv_path = dir.path().join("t.csv");
    assert_ok(&run(seglab()
        .arg("compare")
        .arg(&ft)
        .arg(&ft)
        .arg("--out")
        .arg(&csv_path)));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        for (value, delta) in fields[2..5].iter().zip(&fields[5..8]) {
            let expected = if value.is_empty() { "" } else { "0.000000" };
            assert_eq!(*delta, expected, "line: {line}");
        }
    }
}

/// Full pinned pipeline against a committed golden comparison table.
/// Regenerate with `UPDATE_GOLDEN=1 cargo test -p seglab-cli golden`.
#[test]
fn golden_compare_table_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny_scenario(dir.path());
    let ft = dir.path().join("ft");
    let full = dir.path().join("cs2k");
    assert_ok(&run_method(&sc, &ft, "ft", &[]));
    assert_ok(&run_method(&sc, &full, "cs2k", &[]));
    let csv_path = dir.path().join("golden.csv");
    assert_ok(&run(seglab()
        .arg("compare")
        .arg(&ft)
        .arg(&full)
        .arg("--out")
        .arg(&csv_path)));
    let got = std::fs::read_to_string(&csv_path).unwrap();

    let golden_path = fixture("golden_compare.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden_path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden_path)
        .expect("golden fixture exists; regenerate with UPDATE_GOLDEN=1");
    assert_eq!(got, want);
}
