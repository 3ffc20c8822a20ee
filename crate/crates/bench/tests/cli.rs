use std::path::Path;
use std::process::{Command, Output};

use sage_bench::BenchConfig;

fn bench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sage-bench"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn small(dir: &Path) -> BenchConfig {
    let out = bench(dir, &["init", "--config", "sage.toml"]);
    assert!(out.status.success());
    let mut c = BenchConfig::load(&dir.join("sage.toml")).unwrap();
    c.stream.n = 5000;
    c.dht.ops = 300;
    c.checkpoint.particles = 2000;
    c.offload.sim_ranks = vec![16];
    c
}

#[test]
fn init_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    std::fs::write(dir.path().join("small.toml"), c.to_toml().unwrap()).unwrap();

    let run = bench(
        dir.path(),
        &["run", "--config", "small.toml", "--seed", "3", "--out", "o"],
    );
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("verified           yes"));
    assert!(dir.path().join("o/addb.tsv").is_file());
    assert!(dir.path().join("o/results.json").is_file());

    let report = bench(dir.path(), &["report", "--out", "o"]);
    assert_eq!(report.status.code(), Some(0));
    let again = String::from_utf8(report.stdout).unwrap();
    assert!(dir.path().join("o/report.json").is_file());
    let body = |s: &str| {
        s.lines()
            .take_while(|l| !l.starts_with("addb:") && !l.starts_with("report:"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(body(&text), body(&again));
}

#[test]
fn failed_verification_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.checkpoint.sync = false;
    std::fs::write(dir.path().join("lossy.toml"), c.to_toml().unwrap()).unwrap();
    let run = bench(
        dir.path(),
        &[
            "run",
            "--config",
            "lossy.toml",
            "--workload",
            "checkpoint",
            "--out",
            "o",
        ],
    );
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = bench(dir.path(), &["run", "--workload", "nope", "--out", "o"]);
    assert_eq!(run.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "cluster = 7\n").unwrap();
    let run = bench(dir.path(), &["run", "--config", "bad.toml", "--out", "o"]);
    assert_eq!(run.status.code(), Some(2));
    std::fs::write(dir.path().join("x.tsv"), "garbage\n").unwrap();
    let report = bench(dir.path(), &["report", "--out", "x.tsv"]);
    assert_eq!(report.status.code(), Some(2));
}
