use std::fs;
use std::path::Path;

use sspnet::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("sspnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_from_synthetic_data_to_localization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");

    let code = run(&[
        "synth-gen", "--out", s(&data), "--seed", "3",
        "--set", "spec.num_samples=48", "--set", "val=8", "--set", "test=8",
    ]);
    assert_eq!(code, 0);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "schema.json", "run.json", "synth_config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run_json = data.join("run.json");
    let code = run(&[
        "train", "--config", s(&run_json), "--out", s(&out), "--variant", "S",
        "--set", "epochs=2", "--set", "search_epochs=1", "--set", "batch_size=16",
        "--set", "channels=4", "--set", "feature_dim=8", "--set", "stage_widths=[4,4,4,4]",
    ]);
    assert_eq!(code, 0);
    let ck = out.join("checkpoint.sspnet");
    assert!(ck.exists());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train_config"]["variant"], "S");
    assert!(out.join("eval_report.json").exists());

    let eval_out = tmp.path().join("eval");
    assert_eq!(run(&["eval", "--config", s(&run_json), "--checkpoint", s(&ck), "--out", s(&eval_out)]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_out.join("eval_report.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("\"ma\""));

    let loc_out = tmp.path().join("loc");
    let code = run(&[
        "localize", "--config", s(&run_json), "--checkpoint", s(&ck), "--out", s(&loc_out),
        "--tau-sweep", "0.3,0.5,0.7", "--max-overlays", "2",
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(loc_out.join("localization_report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(text.contains("0.7"));
    assert!(report.is_object() || report.is_array());
    assert!(loc_out.join("localize").join("00000.json").exists());

    let map = tmp.path().join("map.json");
    fs::write(&map, r#"{"Hat": "Hat", "Boots": "Boots"}"#).unwrap();
    let cross_out = tmp.path().join("cross");
    let code = run(&[
        "cross-eval", "--checkpoint", s(&ck), "--data", s(&data.join("test.jsonl")),
        "--schema", s(&data.join("schema.json")), "--map", s(&map), "--out", s(&cross_out),
    ]);
    assert_eq!(code, 0);
    assert!(cross_out.join("cross_eval_report.json").exists());

    fs::write(&map, r#"{"Hat": "NoSuchAttribute"}"#).unwrap();
    let code = run(&[
        "cross-eval", "--checkpoint", s(&ck), "--data", s(&data.join("test.jsonl")),
        "--schema", s(&data.join("schema.json")), "--map", s(&map), "--out", s(&cross_out),
    ]);
    assert_eq!(code, 2);

    assert_eq!(run(&["inspect-afss", "--checkpoint", s(&ck)]), 0);

    // overrides that would change the trained architecture are refused
    let code = run(&[
        "eval", "--config", s(&run_json), "--checkpoint", s(&ck), "--out", s(&eval_out),
        "--set", "channels=16",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["synth-gen", "--out", s(&out), "--set", "no_such_key=1"]), 2);
    assert_eq!(run(&["synth-gen", "--out", s(&out), "--set", "spec.num_samples=0"]), 2);
    assert_eq!(run(&["synth-gen", "--out", s(&out), "--set", "missing-equals"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["localize", "--checkpoint", "x", "--tau", "0.5", "--tau-sweep", "0.1,0.2"]), 2);
    assert_eq!(run(&["train", "--variant", "Q"]), 2);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train_config": {"epochs": 1, "mystery": true}}"#).unwrap();
    assert_eq!(run(&["train", "--config", s(&bad), "--out", s(&out)]), 2);
}

#[test]
fn io_failures_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(run(&["train", "--config", s(&missing)]), 1);

    let junk = tmp.path().join("junk.sspnet");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert_eq!(run(&["inspect-afss", "--checkpoint", s(&junk)]), 1);
    assert_eq!(run(&["inspect-afss", "--checkpoint", s(&missing)]), 1);
}
