use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use fmrivid::pipeline::manifest::Manifest;

const TINY: &[&str] = &[
    "train_scans=60",
    "test_scans=30",
    "pretrain_steps=4",
    "contrastive_steps=4",
    "gen_steps=4",
    "cotrain_steps=4",
    "ddim_steps=3",
    "sample_items=4",
    "nway_trials=5",
];

fn fmrivid(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fmrivid"));
    cmd.arg("--profile").arg("quick").arg("--run-dir").arg(dir);
    for kv in TINY.iter().chain(extra) {
        cmd.arg("--set").arg(kv);
    }
    cmd.args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

#[test]
fn missing_prerequisite_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmrivid(dir.path(), &[], &["sample"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cotrain"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmrivid(dir.path(), &["no_such_key=1"], &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn changed_upstream_key_without_rerun_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fmrivid(dir.path(), &[], &["gen-data"]).status.success());
    assert!(fmrivid(dir.path(), &[], &["pretrain"]).status.success());
    let o = fmrivid(dir.path(), &["voxels=64"], &["--resume", "pretrain"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resume_runs_prerequisites_and_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmrivid(dir.path(), &[], &["--resume", "evaluate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for s in ["gen-data", "pretrain", "contrastive", "train-gen", "cotrain", "sample"] {
        assert!(text.contains(&format!("{s}: ran as a prerequisite")), "{text}");
    }
    let before = std::fs::read(dir.path().join("metrics.csv")).unwrap();

    let again = fmrivid(dir.path(), &[], &["evaluate"]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("already complete"));
    assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), before);

    let manifest = Manifest::load_or_default(&dir.path().join("manifest.txt")).unwrap();
    let tracked: BTreeSet<String> = manifest.all_paths().into_iter().collect();
    let on_disk = files_under(dir.path());
    let orphans: Vec<_> = on_disk.difference(&tracked).collect();
    assert!(orphans.is_empty(), "files outside the manifest: {orphans:?}");
    let missing: Vec<_> = tracked.difference(&on_disk).collect();
    assert!(missing.is_empty(), "manifest entries not on disk: {missing:?}");
}
