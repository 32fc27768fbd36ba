use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn pathtree(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathtree"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PATHTREE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn demo3() -> String {
    data("demo3_taxonomy.json").display().to_string()
}

fn synth(dir: &Path) {
    let o = pathtree(&["synth", "--taxonomy", &demo3(), "--out", "ds"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn validate_tree_counts() {
    let dir = tempfile::tempdir().unwrap();
    let tax = data("sysfl_taxonomy.json").display().to_string();
    let o = pathtree(&["validate-tree", "--taxonomy", &tax], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("nodes=13 leaves=7 internal=6"));
    assert_eq!(out.lines().count(), 2 + 13);
}

#[test]
fn malformed_taxonomy_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.json"), r#"{"name": "r", "children": [{"name": "a"}]}"#).unwrap();
    let o = pathtree(&["validate-tree", "--taxonomy", "t.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: StructureError: "), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = pathtree(&["bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: UsageError: "));
    let o = pathtree(&["--set", "train.nope=1", "gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: ConfigError: "));
    assert_eq!(pathtree(&["train", "--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pathtree(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().last().unwrap().to_string();
    let err: f64 = line.strip_prefix("max_rel_error=").unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn dump_config_reflects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pathtree"))
        .args(["--dump-config", "--set", "train.epochs=3", "gradcheck", "--variant", "gated"])
        .env("PATHTREE_SEED", "11")
        .current_dir(dir.path())
        .output()
        .unwrap();
    let out = stdout(&o);
    assert!(out.contains("seed=11\n") && out.contains("train.epochs=3\n"), "{out}");
    let o = Command::new(env!("CARGO_BIN_EXE_pathtree"))
        .args(["--dump-config", "--seed", "4", "gradcheck", "--variant", "gated"])
        .env("PATHTREE_SEED", "11")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(stdout(&o).contains("\nseed=4\n"));
}

#[test]
fn prompt_rows_must_match_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let tax = data("sysfl_taxonomy.json").display().to_string();
    let o = pathtree(&["train", "--data", "ds", "--taxonomy", &tax, "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: DimensionMismatch: "), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn full_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let tax = demo3();
    let train = |out: &str| {
        let o = pathtree(
            &["--set", "train.epochs=3", "train", "--data", "ds", "--taxonomy", &tax, "--out", out],
            d,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    train("a");
    train("b");
    for f in ["best.ckpt", "last.ckpt", "train_log.tsv", "config.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("a/train_log.tsv")).unwrap().lines().count(), 4);

    let o = pathtree(
        &["eval", "--data", "ds", "--taxonomy", &tax, "--checkpoint", "a/best.ckpt", "--fold", "0", "--out", "ev"],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("samples=12\n"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert!(json["h_f1"].is_number());

    let o = pathtree(
        &["predict", "--data", "ds", "--taxonomy", &tax, "--checkpoint", "a/best.ckpt", "--out", "p.tsv"],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("p.tsv")).unwrap().lines().count(), 61);

    fs::write(d.join("coords.txt"), (0..100).map(|i| format!("{i}\t{}\n", 2 * i)).collect::<String>()).unwrap();
    let slide = fs::read_dir(d.join("ds/slides")).unwrap().next().unwrap().unwrap().path();
    let slide = slide.display().to_string();
    let base = ["heatmap", "--slide", &slide, "--taxonomy", &tax, "--prompts", "ds/prompts.pte", "--checkpoint", "a/best.ckpt"];
    let o = pathtree(&[&base[..], &["--node", "1", "--out", "h.csv"]].concat(), d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("h.csv")).unwrap();
    let total: f64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
    let o = pathtree(&[&base[..], &["--node", "99", "--out", "h2.csv"]].concat(), d);
    assert_eq!(o.status.code(), Some(2));

    let o = pathtree(&["split", "--data", "ds", "--taxonomy", &tax, "--out", "folds.tsv"], d);
    assert_eq!(o.status.code(), Some(0));
    let folds = fs::read_to_string(d.join("folds.tsv")).unwrap();
    assert_eq!(folds.lines().filter(|l| l.ends_with("\t0")).count(), 12);
}

#[test]
fn probe_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let tax = demo3();
    let run = |extra: &[&str], out: &str, epochs: &str| {
        let set = format!("train.epochs={epochs}");
        let mut args = vec!["--set", &set, "train", "--data", "ds", "--taxonomy", &tax, "--out", out];
        args.extend_from_slice(extra);
        let o = pathtree(&args, d);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&["--probe"], "probe", "2");
    assert!(d.join("probe/last.ckpt").exists());
    run(&[], "full", "4");
    run(&[], "half", "2");
    run(&["--resume", "half/last.ckpt"], "resumed", "4");
    assert_eq!(fs::read(d.join("full/last.ckpt")).unwrap(), fs::read(d.join("resumed/last.ckpt")).unwrap());
}
