use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnlab::model::{Model, ModelConfig};
use attnlab::report::parse_matrix_csv;
use tempfile::TempDir;

fn attnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn eight_layer_model(dir: &Path) -> PathBuf {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 8,
        d_ff: 32,
        max_seq: 64,
        ..ModelConfig::default()
    };
    let path = dir.join("m.atnf");
    Model::init(config, 3).unwrap().save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn attn_dump_emits_one_square_csv_per_layer() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let out = tmp.path().join("dump");
    // 11 bytes plus BOS
    let r = attnlab(&[
        "attn-dump",
        "--weights",
        s(&w),
        "--text",
        "twelve toks",
        "--bos",
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for layer in 0..8 {
        let csv = std::fs::read_to_string(out.join(format!("layer{layer}_mean.csv"))).unwrap();
        assert_eq!(parse_matrix_csv(&csv).unwrap().shape(), &[12, 12]);
        assert!(out.join(format!("layer{layer}_mean.pgm")).is_file());
    }
    assert!(!out.join("layer8_mean.csv").exists());
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn capture_heads_writes_every_head() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let out = tmp.path().join("heads");
    let r = attnlab(&[
        "attn-dump",
        "--weights",
        s(&w),
        "--tokens",
        "[256, 104, 105]",
        "--layers",
        "1,6-7",
        "--capture-heads",
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let mut csvs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(
        csvs,
        [
            "layer1_head0.csv",
            "layer1_head1.csv",
            "layer6_head0.csv",
            "layer6_head1.csv",
            "layer7_head0.csv",
            "layer7_head1.csv"
        ]
    );
}

#[test]
fn empty_spec_intervene_matches_attn_dump() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let spec = tmp.path().join("empty.json");
    std::fs::write(&spec, "[]").unwrap();
    let dump = tmp.path().join("dump");
    let inter = tmp.path().join("inter");
    let text = "some input";
    assert!(attnlab(&[
        "attn-dump",
        "--weights",
        s(&w),
        "--text",
        text,
        "--out-dir",
        s(&dump)
    ])
    .status
    .success());
    let r = attnlab(&[
        "intervene",
        "--weights",
        s(&w),
        "--text",
        text,
        "--spec",
        s(&spec),
        "--out-dir",
        s(&inter),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for layer in 0..8 {
        for ext in ["csv", "pgm"] {
            let name = format!("layer{layer}_mean.{ext}");
            assert_eq!(
                std::fs::read(dump.join(&name)).unwrap(),
                std::fs::read(inter.join(&name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn intervene_changes_scores_and_reports_perplexity() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let spec = tmp.path().join("zr.json");
    std::fs::write(
        &spec,
        r#"[{"kind": "zero_recent", "layer_range": [2, 5], "params": {"recent_window": 2}}]"#,
    )
    .unwrap();
    let out = tmp.path().join("inter");
    let r = attnlab(&[
        "intervene",
        "--weights",
        s(&w),
        "--text",
        "abcdefgh",
        "--spec",
        s(&spec),
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let scores =
        parse_matrix_csv(&std::fs::read_to_string(out.join("layer3_mean.csv")).unwrap()).unwrap();
    // the last row may only attend outside the two most recent positions
    assert_eq!(scores.row(7)[6], 0.0);
    assert_eq!(scores.row(7)[7], 0.0);
    let ppl: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("perplexity.json")).unwrap())
            .unwrap();
    assert!(ppl["baseline"].as_f64().unwrap() > 0.0);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("zero_recent"));
}

#[test]
fn replay_reproduces_outputs() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let first = tmp.path().join("a");
    assert!(attnlab(&[
        "generate",
        "--weights",
        s(&w),
        "--prompt",
        "q:",
        "--bos",
        "--max-new",
        "5",
        "--out-dir",
        s(&first)
    ])
    .status
    .success());
    let r = attnlab(&[
        "replay",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out-dir",
        s(&tmp.path().join("b")),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        std::fs::read(first.join("generation.json")).unwrap(),
        std::fs::read(tmp.path().join("b/generation.json")).unwrap()
    );
}

#[test]
fn replay_detects_tampering() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let first = tmp.path().join("a");
    assert!(attnlab(&[
        "attn-dump",
        "--weights",
        s(&w),
        "--text",
        "xyz",
        "--out-dir",
        s(&first)
    ])
    .status
    .success());
    // a different model under the same path changes every output
    Model::init(Model::load(&w).unwrap().config, 4)
        .unwrap()
        .save(&w)
        .unwrap();
    let r = attnlab(&[
        "replay",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out-dir",
        s(&tmp.path().join("b")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let w = eight_layer_model(tmp.path());
    let out = tmp.path().join("x");
    let r = attnlab(&["attn-dump", "--bogus", "--out-dir", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--bogus"));
    assert_eq!(
        attnlab(&[
            "attn-dump",
            "--weights",
            s(&w),
            "--text",
            "x",
            "--layers",
            "8",
            "--out-dir",
            s(&out)
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        attnlab(&[
            "attn-dump",
            "--weights",
            s(&tmp.path().join("missing")),
            "--text",
            "x",
            "--out-dir",
            s(&out)
        ])
        .status
        .code(),
        Some(2)
    );
    let bad_spec = tmp.path().join("bad.json");
    std::fs::write(&bad_spec, r#"[{"kind": "amplify", "layer_range": [0, 9]}]"#).unwrap();
    assert_eq!(
        attnlab(&[
            "intervene",
            "--weights",
            s(&w),
            "--text",
            "x",
            "--spec",
            s(&bad_spec),
            "--out-dir",
            s(&out)
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(attnlab(&["--version"]).status.code(), Some(0));
}

#[test]
fn config_file_sets_training_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"d_model": 8, "n_heads": 2, "n_layers": 2, "d_ff": 16, "max_seq": 256},
            "train": {"steps": 50, "learning_rate": 0.01}, "dataset": {"n_items": 4, "n_train": 20}}"#,
    )
    .unwrap();
    let out = tmp.path().join("t");
    let r = attnlab(&[
        "train",
        "--config",
        s(&cfg),
        "--steps",
        "3",
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["steps"], 3);
    assert_eq!(manifest["config"]["train"]["learning_rate"], 0.01);
    assert_eq!(manifest["config"]["model"]["d_model"], 8);
    assert!(!manifest["args"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a == "--out-dir"));
    let model = Model::load(out.join("model.atnf")).unwrap();
    assert_eq!(model.config.n_layers, 2);
}

#[test]
fn report_diff_maps_signed_pixels() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    std::fs::write(&a, "1,0\n0.5,0.5\n").unwrap();
    std::fs::write(&b, "0,0\n0.5,0.5\n").unwrap();
    let out = tmp.path().join("diff");
    assert!(attnlab(&[
        "report",
        "diff",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--out-dir",
        s(&out)
    ])
    .status
    .success());
    let pgm = std::fs::read(out.join("diff.pgm")).unwrap();
    assert_eq!(&pgm[pgm.len() - 4..], &[255, 128, 128, 128]);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"report diff\""));
}
