use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pfedafm::runner::{read_csv, read_records, RunSummary, SweepRow};

fn pfedafm(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pfedafm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const SMOKE: &str = "algorithm = pfedafm\nN = 2\nT = 1\n";

#[test]
fn smoke_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMOKE).unwrap();
    let start = Instant::now();
    let (code, stdout, stderr) = pfedafm(&["run", "c.txt", "--out", "a"], dir.path());
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(stdout.lines().count(), 1);
    assert_eq!(pfedafm(&["run", "c.txt", "--out", "b"], dir.path()).0, 0);

    let summary: Vec<RunSummary> = read_csv(&dir.path().join("a/summary.csv")).unwrap();
    let seed_dir = format!("seed_{}", summary[0].seed);
    let a = fs::read(dir.path().join("a").join(&seed_dir).join("records.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b").join(&seed_dir).join("records.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_records(&dir.path().join("a").join(&seed_dir).join("records.jsonl")).unwrap().len(), 1);
}

#[test]
fn seed_flag_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), format!("{SMOKE}repeats = 3\n")).unwrap();
    let (code, stdout, _) = pfedafm(&["run", "c.txt", "--out", "o", "--seed", "11"], dir.path());
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 3);
    let summary: Vec<RunSummary> = read_csv(&dir.path().join("o/summary.csv")).unwrap();
    let seeds: Vec<u64> = summary.iter().map(|s| s.seed).collect();
    assert_eq!(seeds, (0..3).map(|r| pfedafm::runner::repeat_seed(11, r)).collect::<Vec<_>>());
}

#[test]
fn refuses_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMOKE).unwrap();
    fs::create_dir(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/keep"), "x").unwrap();
    let (code, _, stderr) = pfedafm(&["run", "c.txt", "--out", "o"], dir.path());
    assert_eq!(code, 1);
    assert!(stderr.contains("--force"));
    assert!(dir.path().join("o/keep").exists());
    assert_eq!(pfedafm(&["run", "c.txt", "--out", "o", "--force"], dir.path()).0, 0);
}

#[test]
fn config_errors_exit_with_one_and_list_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), "algorithm = fedavg\nC = 0\nbogus = 1\n").unwrap();
    let (code, _, stderr) = pfedafm(&["run", "c.txt"], dir.path());
    assert_eq!(code, 1);
    assert!(stderr.contains("participation fraction must be in (0,1]"));
    assert!(stderr.contains("homogeneous"));
    assert!(stderr.contains("bogus"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), "algorithm = pfedafm\ndata = csv:missing.csv\n").unwrap();
    let (code, _, stderr) = pfedafm(&["run", "c.txt", "--out", "o"], dir.path());
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn sweep_layout() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMOKE).unwrap();
    let (code, stdout, stderr) = pfedafm(
        &["sweep", "c.txt", "--key", "eta_alpha", "--values", "0.001,0.01,0.1,1", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(stdout.lines().count(), 4);
    for v in ["0.001", "0.01", "0.1", "1"] {
        assert!(dir.path().join(format!("s/eta_alpha_{v}/summary.csv")).exists());
    }
    let rows: Vec<SweepRow> = read_csv(&dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(rows.len(), 4);

    let (code, _, _) = pfedafm(&["sweep", "c.txt", "--key", "rounds", "--values", "1,2", "--out", "t"], dir.path());
    assert_eq!(code, 1);
    let (code, _, _) = pfedafm(&["sweep", "c.txt", "--key", "gamma", "--values", "", "--out", "t"], dir.path());
    assert_eq!(code, 1);
}
