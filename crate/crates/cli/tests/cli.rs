use std::path::Path;
use std::process::{Command, Output};

fn embtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embtune"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = embtune(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SYNTH: &[&str] = &[
    "synth",
    "--out-dir",
    "data",
    "--classes",
    "3",
    "--per-class",
    "30",
    "--dim",
    "16",
    "--frames-min",
    "2",
    "--frames-max",
    "5",
    "--separation",
    "6",
    "--noise",
    "1",
];
const SHAPE: &[&str] = &[
    "--hidden-dims",
    "16",
    "--bottleneck-dim",
    "8",
    "--epochs",
    "3",
    "--batch-size",
    "8",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_pipeline(dir: &Path) {
    ok(dir, SYNTH);
    let args = with(
        &[
            "train-encoder",
            "--manifest",
            "data/manifest.jsonl",
            "--out",
            "enc.ckpt",
            "--run-log",
            "enc.jsonl",
        ],
        SHAPE,
    );
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    ok(
        dir,
        &[
            "train-adapter",
            "--manifest",
            "data/manifest.jsonl",
            "--encoder-checkpoint",
            "enc.ckpt",
            "--out",
            "ada.ckpt",
            "--adapter-hidden",
            "8",
            "--epochs",
            "5",
            "--batch-size",
            "8",
            "--run-log",
            "ada.jsonl",
        ],
    );
    let common = ["--manifest", "data/manifest.jsonl", "--checkpoint", "ada.ckpt"];
    ok(
        dir,
        &with(&["embed", "--out", "emb.csv"], &common)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    ok(
        dir,
        &with(&["report", "--out", "report.csv"], &common)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    ok(
        dir,
        &with(&["project", "--out", "pca.csv"], &common)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    ok(
        dir,
        &with(
            &[
                "project",
                "--method",
                "tsne",
                "--perplexity",
                "4",
                "--iterations",
                "300",
                "--out",
                "tsne.csv",
            ],
            &common,
        )
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>(),
    );
}

const ARTIFACTS: &[&str] = &[
    "data/manifest.jsonl",
    "enc.ckpt",
    "enc.jsonl",
    "ada.ckpt",
    "ada.jsonl",
    "emb.csv",
    "report.csv",
    "pca.csv",
    "tsne.csv",
];

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    for name in ARTIFACTS {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, y, "{name} differs between identical runs");
    }

    let dir = a.path();
    let emb = std::fs::read_to_string(dir.join("emb.csv")).unwrap();
    assert!(emb.starts_with("id,label,e0,e1,"));
    // 30 per class split 21 / 5 / 4
    assert_eq!(emb.lines().count(), 1 + 3 * 4);
    let pca = std::fs::read_to_string(dir.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().next(), Some("id,label,x,y"));
    let log = std::fs::read_to_string(dir.join("enc.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64())
        .collect();
    assert_eq!(epochs, vec![1, 2, 3]);

    let eval = ok(
        dir,
        &[
            "evaluate",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "ada.ckpt",
            "--split",
            "dev",
        ],
    );
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["samples"], 15);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(dir.path(), &["gradcheck"]);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = embtune(
        dir.path(),
        &["train-encoder", "--manifest", "m", "--out", "o", "--epochs", "0"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--epochs"));

    let out = embtune(
        dir.path(),
        &["train-encoder", "--manifest", "m", "--out", "o", "--bogus"],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = embtune(
        dir.path(),
        &["train-encoder", "--manifest", "m", "--out", "o", "--beta=-1"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--beta"));

    ok(dir.path(), SYNTH);
    // default bottleneck (128) is wider than the 16-dim features
    let out = embtune(
        dir.path(),
        &["train-encoder", "--manifest", "data/manifest.jsonl", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--bottleneck-dim"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = embtune(
        dir.path(),
        &["evaluate", "--manifest", "missing.jsonl", "--checkpoint", "c"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.jsonl"));

    ok(dir.path(), SYNTH);
    let args = with(
        &[
            "train-encoder",
            "--manifest",
            "data/manifest.jsonl",
            "--out",
            "enc.ckpt",
        ],
        SHAPE,
    );
    ok(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>());
    // an encoder-only checkpoint has no adapter to evaluate
    let out = embtune(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "enc.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("adapter"));
}

#[test]
fn task_preset_sets_margin() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    let run = |extra: &[&str]| {
        let args = with(
            &with(
                &["train-encoder", "--manifest", "data/manifest.jsonl", "--out", "e.ckpt"],
                SHAPE,
            )
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
            extra,
        );
        ok(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>())["config"].clone()
    };
    assert_eq!(run(&["--task-preset", "age"])["margin"], 1.2);
    assert_eq!(run(&["--task-preset", "gender"])["margin"], 1.0);
    assert_eq!(run(&["--task-preset", "age", "--margin", "0.5"])["margin"], 0.5);
    let cfg = run(&[]);
    assert_eq!(cfg["margin"], 1.0);
    assert_eq!(cfg["beta"], 0.01);
    assert_eq!(cfg["loss_mode"], "combined");
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = embtune(dir.path(), &["train-encoder", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--beta <BETA>",
        "[default: 0.01]",
        "[default: 0.005]",
        "[default: combined]",
        "[default: 20]",
        "[default: 32]",
    ] {
        assert!(help.contains(flag), "missing {flag} in:\n{help}");
    }
}
