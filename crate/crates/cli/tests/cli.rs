use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tape_cli::runs::file_sha256;

fn tape(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tape"))
        .args(args)
        .env("TAPE_RUNS_DIR", runs)
        .output()
        .expect("tape runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{:?}", dirs);
    dirs[0].clone()
}

fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, file_sha256(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for runs in [a.path(), b.path()] {
        let o = tape(runs, &["--seed", "3", "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (da, db) = (only_run_dir(a.path()), only_run_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    assert!(da.file_name().unwrap().to_str().unwrap().starts_with("gen-data-3-"));
    let (ha, hb) = (tree_hashes(&da), tree_hashes(&db));
    assert!(ha.iter().any(|(p, _)| p == "sets.txt"));
    assert!(ha.iter().any(|(p, _)| p == "config.txt"));
    // config.txt records the runs directory, which differs by construction.
    let strip = |h: Vec<(String, String)>| h.into_iter().filter(|(p, _)| p != "config.txt").collect::<Vec<_>>();
    assert_eq!(strip(ha), strip(hb));
}

#[test]
fn bench_without_adapt_names_the_missing_stage() {
    let runs = tempfile::tempdir().unwrap();
    let o = tape(runs.path(), &["bench"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("`adapt`"), "{}", err);
    assert_eq!(fs::read_dir(runs.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn unknown_config_key_is_reported_with_its_line() {
    let runs = tempfile::tempdir().unwrap();
    let cfg = runs.path().join("run.cfg");
    fs::write(&cfg, "# toy run\nseed = 2\nmodel.widht = 9\n").unwrap();
    let o = tape(runs.path(), &["--config", cfg.to_str().unwrap(), "config"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("model.widht") && err.contains("line 3"), "{}", err);
}

#[test]
fn resolved_config_reflects_overrides() {
    let runs = tempfile::tempdir().unwrap();
    let o = tape(runs.path(), &["--set", "model.depth=3", "--seed", "9", "config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("model.depth = 3\n") && text.contains("seed = 9\n"), "{}", text);
}
