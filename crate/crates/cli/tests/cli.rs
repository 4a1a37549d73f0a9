use std::path::Path;
use std::process::{Command, Output};

use duet_core::index::RetrievalResult;
use duet_core::testing::tiny_run;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run duet")
}

fn duet(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "duet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn train_index_query_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_run(dir.path());
    config.epochs = 1;
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config.to_toml().unwrap()).unwrap();

    duet(&[
        "train",
        "--config",
        s(&config_path),
        "--override",
        "validate_every=1",
    ]);
    let latest = config.output.join("latest");
    assert!(latest.join("model.json").exists());
    assert!(config.output.join("best/model.json").exists());

    let index = dir.path().join("index");
    let manifest = dir.path().join("shapes/manifest.json");
    duet(&[
        "index",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&latest),
        "--out",
        s(&index),
    ]);

    let sketch = dir.path().join("shapes/sketches/test_000.png");
    let query = [
        "query",
        "--index",
        s(&index),
        "--sketch",
        s(&sketch),
        "--text",
        "red color",
        "-k",
        "3",
    ];
    let result: RetrievalResult = serde_json::from_slice(&duet(&query).stdout).unwrap();
    assert_eq!(result.ids.len(), 3);
    assert!(result.scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(result.query.text.as_deref(), Some("red color"));
    let again: RetrievalResult = serde_json::from_slice(&duet(&query).stdout).unwrap();
    assert_eq!(result, again);

    let report_path = dir.path().join("report.json");
    let with_index = json(&duet(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&latest),
        "--index",
        s(&index),
        "--out",
        s(&report_path),
    ]));
    let on_the_fly = json(&duet(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&latest),
    ]));
    assert_eq!(with_index["metrics"], on_the_fly["metrics"]);
    assert_eq!(with_index["protocol"], "fine_grained");
    for key in ["acc@1", "acc@5", "acc@10"] {
        let v = with_index["metrics"][key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{key} = {v}");
    }
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, with_index);

    let sketch_only = json(&duet(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&latest),
        "--sketch-only",
    ]));
    assert_ne!(sketch_only["mode"], with_index["mode"]);
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_run(dir.path());
    config.epochs = 1;
    config.validate_every = 0;
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config.to_toml().unwrap()).unwrap();
    duet(&["train", "--config", s(&config_path)]);
    let latest = config.output.join("latest");
    let before = std::fs::read(latest.join("trainable.safetensors")).unwrap();
    let out = duet(&["train", "--config", s(&config_path), "--resume", s(&latest)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("finished 1 epochs"));
    assert_eq!(
        before,
        std::fs::read(latest.join("trainable.safetensors")).unwrap()
    );
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--protocol",
        "nonsense",
        "--manifest",
        "m.json",
        "--checkpoint",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));

    let out = run(&[
        "query",
        "--index",
        s(&dir.path().join("missing")),
        "--sketch",
        "x.png",
    ]);
    assert!(!out.status.success());

    let out = run(&["train", "--config", s(&dir.path().join("none.toml"))]);
    assert!(!out.status.success());
}
