use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textspotter"))
        .args(args)
        .env_remove("TEXTSPOTTER_OUT")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn generate_writes_images_annotations_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let r = run(&["generate", "--count", "3", "--seed", "2", "--out", &s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ann = std::fs::read_to_string(out.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 3);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 2);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 4);
    let toml = m["config_toml"].as_str().unwrap();
    assert!(toml.contains("seed = 2"));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn non_empty_output_needs_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    std::fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let r = run(&["generate", "--count", "1", "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_line(&r)["error"], "output_exists");
    let r = run(&["generate", "--count", "1", "--out", &out, "--overwrite"]);
    assert!(r.status.success());
    assert!(tmp.path().join("keep.txt").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_textspotter"))
        .args(["generate", "--count", "1"])
        .env("TEXTSPOTTER_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(tmp.path().join("generate/annotations.jsonl").is_file());
    let r = run(&["generate", "--count", "1"]);
    assert_eq!(error_line(&r)["error"], "usage");
}

#[test]
fn invalid_config_is_a_single_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&["generate", "--set", "train.milestones=[5, 3]", "--out", &s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    let e = error_line(&r);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("milestones"));
    let r = run(&["generate", "--set", "model.no_such_key=1", "--out", &s(&tmp.path().join("o"))]);
    assert_eq!(error_line(&r)["error"], "config");
    let r = run(&["eval", "--bogus"]);
    assert_eq!(error_line(&r)["error"], "usage");
}

#[test]
fn annotations_as_predictions_score_one_and_rescore_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(run(&["generate", "--count", "3", "--out", &s(&data)]).status.success());
    let preds: String = std::fs::read_to_string(data.join("annotations.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let rec: serde_json::Value = serde_json::from_str(l).unwrap();
            let inst: Vec<serde_json::Value> = rec["instances"]
                .as_array()
                .unwrap()
                .iter()
                .map(|i| serde_json::json!({"polygon": i["polygon"], "score": 1.0, "transcript": i["transcript"]}))
                .collect();
            serde_json::json!({"image": rec["image"], "instances": inst}).to_string() + "\n"
        })
        .collect();
    let pfile = tmp.path().join("p.jsonl");
    std::fs::write(&pfile, preds).unwrap();
    for dir in ["e1", "e2"] {
        let r = run(&["eval", "--data", &s(&data), "--predictions", &s(&pfile), "--out", &s(&tmp.path().join(dir))]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let a = std::fs::read(tmp.path().join("e1/report.json")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("e2/report.json")).unwrap());
    let rep: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(rep["detection"]["hmean"], 1.0);
    assert_eq!(rep["e2e"]["hmean"], 1.0);
    assert_eq!(rep["one_minus_ned"], 1.0);
}

#[test]
fn checkpoint_with_other_architecture_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let train = tmp.path().join("train");
    assert!(run(&["generate", "--count", "1", "--set", "synth.width=64", "--set", "synth.height=64", "--out", &s(&data)]).status.success());
    let small = [
        "--set", "model.backbone_channels=[8, 8, 16, 16]", "--set", "model.d_model=16", "--set", "model.ffn_dim=32",
        "--set", "model.encoder_layers=1", "--set", "model.decoder_layers=1", "--set", "model.num_queries=5",
    ];
    let (data_s, train_s) = (s(&data), s(&train));
    let mut args = vec!["train", "--data", &data_s, "--set", "train.iterations=0", "--out", &train_s];
    args.extend(small);
    let r = run(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ck = s(&train.join("checkpoint.safetensors"));
    let r = run(&["infer", "--checkpoint", &ck, "--input", &s(&data), "--set", "model.d_model=32", "--out", &s(&tmp.path().join("i"))]);
    assert_eq!(r.status.code(), Some(3));
    let e = error_line(&r);
    assert_eq!(e["error"], "checkpoint");
    assert!(e["message"].as_str().unwrap().contains("model.d_model: checkpoint 16, config 32"));
    let r = run(&["infer", "--checkpoint", &ck, "--input", &s(&data), "--out", &s(&tmp.path().join("i"))]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = run(&[
        "visualize", "--predictions", &s(&tmp.path().join("i/predictions.jsonl")), "--images", &s(&data), "--out",
        &s(&tmp.path().join("v")),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(tmp.path().join("v/000000.png").is_file());
}
