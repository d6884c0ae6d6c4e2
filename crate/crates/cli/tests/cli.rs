use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "synthetic.num_classes=3",
    "synthetic.per_class=10",
    "synthetic.canvas=32",
    "model.profile=tinycnn",
    "model.width=8",
    "model.proj_hidden=32",
    "model.proj_dim=16",
    "data.train_size=32",
    "data.test_resize=32",
    "data.test_crop=32",
    "contrastive.queue_capacity=64",
    "optim.batch_size=8",
    "run.viz_samples=4",
];

fn ppssl(runs: &Path, args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppssl"));
    cmd.env("PPSSL_RUN_DIR", runs).env("RUST_LOG", "warn").args(args);
    for s in SMALL.iter().map(|s| s.to_string()).chain(sets.iter().cloned()) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(o: &Output, key: &str) -> PathBuf {
    let text = stdout(o);
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}=` in output:\n{text}"));
    PathBuf::from(line.split_whitespace().next().unwrap())
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Synthetic data plus a two-epoch training run; returns (manifest, final checkpoint).
fn trained(runs: &Path) -> (String, PathBuf) {
    let made = ppssl(runs, &["make-synthetic"], &[]);
    assert_ok(&made);
    let manifest = format!("data.manifest={}", value(&made, "manifest").display());
    let train = ppssl(runs, &["train"], &[manifest.clone(), "optim.epochs=2".into()]);
    assert_ok(&train);
    (manifest, value(&train, "checkpoint"))
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ppssl(tmp.path(), &["train", "--no-such-flag"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ppssl(
        tmp.path(),
        &["train"],
        &["optim.lr=-1".into(), "contrastive.temperature=0".into(), "ais.alpha=-2".into()],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for key in ["optim.lr", "contrastive.temperature", "ais.alpha"] {
        assert!(err.contains(key), "missing {key} in: {err}");
    }

    let o = ppssl(tmp.path(), &["train"], &["optim.no_such_key=1".into()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_embed_evaluate_and_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let (manifest, ckpt) = trained(runs);
    assert!(ckpt.exists());
    let run_dir = ckpt.parent().unwrap().parent().unwrap();
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    // 3 classes × 8 training images, batch 8, 2 epochs.
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);

    let embed = ppssl(runs, &["embed", "--checkpoint", ckpt.to_str().unwrap()], &[manifest.clone()]);
    assert_ok(&embed);
    let features = value(&embed, "features");
    let labels = PathBuf::from(format!("{}.labels", features.display()));
    assert!(labels.exists());

    let eval = ppssl(
        runs,
        &[
            "eval-retrieval",
            "--features",
            features.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&eval);
    let text = stdout(&eval);
    for key in ["rank1", "rank5", "mAP"] {
        assert!(text.contains(key), "{text}");
    }
    let from_ckpt = ppssl(runs, &["eval-retrieval", "--checkpoint", ckpt.to_str().unwrap()], &[manifest.clone()]);
    assert_ok(&from_ckpt);
    let metric_lines = |s: &str| s.lines().filter(|l| !l.starts_with("run_dir=")).map(String::from).collect::<Vec<_>>();
    assert_eq!(metric_lines(&text), metric_lines(&stdout(&from_ckpt)));

    let probe = ppssl(runs, &["eval-probe", "--checkpoint", ckpt.to_str().unwrap()], &[manifest.clone(), "run.probe_epochs=20".into()]);
    assert_ok(&probe);
    assert!(stdout(&probe).contains("top1"));

    let out = runs.join("viz");
    let viz = ppssl(
        runs,
        &["visualize", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[manifest],
    );
    assert_ok(&viz);
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 16);
}

#[test]
fn resume_continues_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let (manifest, ckpt) = trained(runs);
    let run_dir = ckpt.parent().unwrap().parent().unwrap().to_path_buf();
    let first = run_dir.join("checkpoints/epoch_0001.ckpt");
    let resumed = ppssl(
        runs,
        &["train", "--resume", first.to_str().unwrap()],
        &[manifest, "optim.epochs=2".into()],
    );
    assert_ok(&resumed);
    assert_eq!(value(&resumed, "run_dir"), run_dir);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
}

#[test]
fn fixture_teacher_cache_feeds_training() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let made = ppssl(runs, &["make-synthetic"], &[]);
    assert_ok(&made);
    let manifest = format!("data.manifest={}", value(&made, "manifest").display());
    let cache = ppssl(runs, &["cache-teacher", "--fixture"], &[manifest.clone()]);
    assert_ok(&cache);
    let path = value(&cache, "teacher_cache");
    let train = ppssl(
        runs,
        &["train"],
        &[
            manifest,
            "optim.epochs=1".into(),
            "ais.teacher=cache".into(),
            format!("ais.teacher_cache={}", path.display()),
        ],
    );
    assert_ok(&train);

    let missing = ppssl(runs, &["train"], &["ais.teacher=cache".into(), "ais.teacher_cache=/nonexistent.ppse".into(), "data.manifest=/nonexistent.tsv".into()]);
    assert_eq!(missing.status.code(), Some(1));
}
