use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn somgen(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_somgen"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn default_gen_data_is_deterministic_and_split_three_one_one() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let summary = ok(&somgen(&["gen-data", "--out", a.to_str().unwrap(), "--seed", "7"], &[]));
    ok(&somgen(&["gen-data", "--out", b.to_str().unwrap(), "--seed", "7"], &[]));
    assert_eq!(summary["records"], 1000);
    let splits = summary["splits"].as_object().unwrap();
    assert_eq!(splits.len(), 4);
    for counts in splits.values() {
        assert_eq!(counts, &serde_json::json!([150, 50, 50]));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 1000 * 4 + 1);
    assert!(ta == tb, "regenerated trees differ");
}

#[test]
fn indivisible_resolution_exits_with_config_code_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let res = somgen(
        &["gen-data", "--out", out.to_str().unwrap()],
        &[("SOMGEN_DATASET_IMAGE_RESOLUTION", "60"), ("SOMGEN_MODEL_EMBED_RESOLUTION", "60")],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let res = somgen(&["gen-data", "--out", out.to_str().unwrap(), "--profile", "huge"], &[]);
    assert_eq!(res.status.code(), Some(2));
    let res = somgen(&["gen-data", "--out", out.to_str().unwrap()], &[("SOMGEN_TRAIN_NOSUCHKEY", "1")]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    let m = missing.to_str().unwrap();
    let res = somgen(&["eval", "--checkpoint", m, "--dataset", m], &[]);
    assert_eq!(res.status.code(), Some(3));
    let res = somgen(&["train", "--dataset", m, "--out", m], &[]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn empty_training_split_exits_with_training_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"dataset": {"snapshots_per_condition": 5}, "train": {"batch_size": 16, "epochs": 1}}"#,
    );
    let ds = tmp.path().join("ds");
    ok(&somgen(&["gen-data", "--config", &cfg, "--out", ds.to_str().unwrap()], &[]));
    let ck = tmp.path().join("ck");
    let res = somgen(
        &["train", "--config", &cfg, "--dataset", ds.to_str().unwrap(), "--out", ck.to_str().unwrap()],
        &[],
    );
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn toy_pipeline_trains_evaluates_transfers_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{
            "dataset": {"snapshots_per_condition": 200},
            "train": {"batch_size": 16, "epochs": 12, "lr": 0.001},
            "transfer": {"k_list": [0, 32, 128], "finetune_epochs": 1, "seeds": [0]},
            "output": {"render_maps": 2, "timing_steps": 2}
        }"#,
    );
    let ds = tmp.path().join("ds");
    let ck = tmp.path().join("ck");
    let ev = tmp.path().join("ev");
    let (ds_s, ck_s, ev_s) = (ds.to_str().unwrap(), ck.to_str().unwrap(), ev.to_str().unwrap());
    ok(&somgen(&["gen-data", "--config", &cfg, "--out", ds_s], &[]));

    let report = ok(&somgen(&["train", "--config", &cfg, "--dataset", ds_s, "--out", ck_s], &[]));
    assert_eq!(report["n_train"], 360);
    for f in ["config.json", "weights.bin", "metrics.jsonl", "run.json", "train_report.json"] {
        assert!(ck.join(f).is_file(), "{f} missing");
    }
    let run: Value = serde_json::from_str(&std::fs::read_to_string(ck.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["train"]["conditions"].as_array().unwrap().len(), 3);

    let eval = ok(&somgen(&["eval", "--config", &cfg, "--checkpoint", ck_s, "--dataset", ds_s, "--out", ev_s], &[]));
    let nmse = eval["nmse"].as_f64().unwrap();
    assert!(nmse < 0.05, "toy test NMSE {nmse}");
    assert_eq!(eval["n_test"], 120);
    assert_eq!(std::fs::read_dir(ev.join("maps")).unwrap().count(), 2);
    let again = ok(&somgen(&["eval", "--config", &cfg, "--checkpoint", ck_s, "--dataset", ds_s], &[]));
    assert_eq!(again, eval);

    let curve = ok(&somgen(&["transfer", "--config", &cfg, "--checkpoint", ck_s, "--dataset", ds_s], &[]));
    let points = curve["points"].as_array().unwrap();
    assert_eq!(points.iter().map(|p| p["k"].as_u64().unwrap()).collect::<Vec<_>>(), vec![0, 32, 128]);
    let zero_shot_cfg = write_config(
        tmp.path(),
        r#"{"train": {"batch_size": 16, "conditions": [{"scenario": "widelane", "altitude_m": 200.0, "frequency_hz": 28e9}]},
            "transfer": {"target": {"scenario": "crossroad", "altitude_m": 50.0, "frequency_hz": 28e9}}}"#,
    );
    let direct = ok(&somgen(&["eval", "--config", &zero_shot_cfg, "--checkpoint", ck_s, "--dataset", ds_s], &[]));
    assert_eq!(points[0]["median"], direct["nmse"]);

    let costs = ok(&somgen(&["report", "--config", &cfg, "--checkpoint", ck_s], &[]));
    let counts = &costs["counts"];
    let sum = counts["embed"].as_u64().unwrap() + counts["backbone"].as_u64().unwrap() + counts["decode"].as_u64().unwrap();
    assert_eq!(counts["total"].as_u64().unwrap(), sum);
    let weights = std::fs::read(ck.join("weights.bin")).unwrap();
    assert!(weights.len() as u64 > 4 * counts["total"].as_u64().unwrap());
}
