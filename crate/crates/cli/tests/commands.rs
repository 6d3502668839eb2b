use std::path::Path;

use pixseq_cli::metrics::{parse_lines, MetricLine};
use pixseq_cli::run;

fn call(out: &Path, args: &[&str]) -> (i32, Vec<MetricLine>, String) {
    let mut argv = vec!["pixseq", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    let (mut so, mut se) = (Vec::new(), Vec::new());
    let code = run(argv, &mut so, &mut se);
    (code, parse_lines(&String::from_utf8(so).unwrap()), String::from_utf8(se).unwrap())
}

fn value(lines: &[MetricLine], metric: &str) -> f64 {
    lines.iter().find(|l| l.metric == metric).unwrap_or_else(|| panic!("no {metric}")).value
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(call(dir.path(), &["frobnicate"]).0, 1);
    assert_eq!(call(dir.path(), &["sample", "--bogus"]).0, 1);
    assert_eq!(call(dir.path(), &["--help"]).0, 0);
    assert_eq!(call(dir.path(), &["sample"]).0, 1);
}

#[test]
fn config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"arch": {"d_model": 64, "depth": 3}}}"#).unwrap();
    let (code, _, err) = call(dir.path(), &["--config", cfg.to_str().unwrap(), "shard-cost"]);
    assert_eq!(code, 2, "{err}");
    std::fs::write(&cfg, r#"{"model": {"arch": {"heads": 5}}}"#).unwrap();
    assert_eq!(call(dir.path(), &["--config", cfg.to_str().unwrap(), "shard-cost"]).0, 1);
}

#[test]
fn missing_artifacts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = call(dir.path(), &["train-model"]);
    assert_eq!(code, 2);
    assert!(err.contains("make-data"), "{err}");
    assert_eq!(call(dir.path(), &["inspect-checkpoint", dir.path().to_str().unwrap()]).0, 2);
}

#[test]
fn simulator_commands_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, lines, err) = call(dir.path(), &["simulate-pipeline", "--sweep"]);
    assert_eq!(code, 0, "{err}");
    let b = value(&lines, "bubble_ratio");
    assert!((0.0..1.0).contains(&b));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("pipeline_trace.json")).unwrap()).unwrap();
    assert!(trace.get("devices").is_some());
    let csv = std::fs::read_to_string(dir.path().join("pipeline_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count() as f64, value(&lines, "sweep_rows") + 1.0);

    let (code, lines, _) = call(dir.path(), &["shard-cost"]);
    assert_eq!(code, 0);
    assert!(value(&lines, "peak_output_elems") > 0.0);
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("small.json");
    std::fs::write(
        &cfg,
        r#"{
  "data": {"vocab_size": 300},
  "tokenizer": {"train": {"steps": 3, "batch": 4}},
  "model": {"arch": {"enc_layers": 1, "dec_layers": 1, "d_model": 16, "d_mlp": 32, "heads": 2},
            "train": {"steps": 3, "batch": 2},
            "superres": {"train": {"steps": 2, "batch": 2}}},
  "reranker": {"arch": {"d_model": 16, "d_mlp": 32, "heads": 2, "image_layers": 1, "text_layers": 1, "embed_dim": 8},
               "train": {"steps": 3, "batch": 4}},
  "sampler": {"n_samples": 2}
}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    for cmd in ["make-data", "train-tokenizer", "train-model", "train-reranker", "train-sr"] {
        let (code, _, err) = call(out, &["--config", c, cmd]);
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    let held = out.join("data/heldout");
    let held = held.to_str().unwrap();
    let (code, lines, err) = call(out, &["--config", c, "eval-fid", "--a", held, "--b", held]);
    assert_eq!(code, 0, "{err}");
    assert!(value(&lines, "fid") <= 1e-6);

    let dest = out.join("s");
    let (code, lines, err) = call(out, &["--config", c, "sample", "--prompt", "a red circle", "--rerank", "--sr", "--dest", dest.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(value(&lines, "images"), 2.0);
    assert!(dest.join("000_01.png").exists());

    let (code, lines, _) = call(out, &["--config", c, "eval-alignment", "--limit", "2"]);
    assert_eq!(code, 0);
    assert_eq!(value(&lines, "prompts"), 2.0);
    let (code, lines, _) = call(out, &["--config", c, "retrieve", "--query", "a red circle", "-k", "3"]);
    assert_eq!(code, 0);
    assert_eq!(lines.len(), 3);
    let (code, lines, _) = call(out, &["inspect-checkpoint", out.join("model").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(lines.iter().any(|l| l.metric == "params" && l.label.as_deref() == Some("seq2seq")));
}
