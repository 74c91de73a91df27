use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &[&str] = &[
    "intents=4",
    "templates_per_intent=4",
    "n_train=32",
    "n_test_each=8",
    "n_dev=8",
    "n_speakers=6",
    "n_heldout_speakers=2",
    "n_unlabeled=40",
    "d_model=8",
    "n_heads=2",
    "ffn_dim=16",
    "encoder_layers=1",
    "pass1_layers=1",
    "sem_dim=8",
    "sem_heads=2",
    "sem_ffn_dim=16",
    "sem_layers=1",
    "deliberation_layers=1",
    "pass2_layers=1",
    "pretrain_epochs=1",
    "stage1_epochs=2",
    "stage2_epochs=1",
    "batch_size=8",
    "warmup_steps=4",
    "dev_slice=4",
];

fn dslu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dslu")).args(args).output().expect("binary runs")
}

/// Runs with the tiny settings prepended as `--set` flags.
fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into(), "--out".into(), out.display().to_string()];
    for kv in TINY {
        args.push("--set".into());
        args.push((*kv).into());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dslu(&refs)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), text(&o.stdout), text(&o.stderr));
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

struct Pipeline {
    _tmp: TempDir,
    corpus: PathBuf,
    lm: PathBuf,
    s1: PathBuf,
    s2: PathBuf,
    root: PathBuf,
}

fn pipeline() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let d = |n: &str| root.join(n);
    ok(&tiny("gen-corpus", &d("corpus"), &["--seed", "4"]));
    let corpus = d("corpus").display().to_string();
    ok(&tiny("pretrain-lm", &d("lm"), &["--corpus", &corpus]));
    let lm = d("lm/model.ckpt").display().to_string();
    ok(&tiny("train-stage1", &d("s1"), &["--corpus", &corpus, "--checkpoint", &lm]));
    let s1 = d("s1/model.ckpt").display().to_string();
    ok(&tiny("train-stage2", &d("s2"), &["--corpus", &corpus, "--checkpoint", &s1]));
    Pipeline { corpus: d("corpus"), lm: d("lm/model.ckpt"), s1: d("s1/model.ckpt"), s2: d("s2/model.ckpt"), root, _tmp: tmp }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn gen_corpus_is_reproducible_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&tiny("gen-corpus", &a, &["--seed", "9"]));
    ok(&tiny("gen-corpus", &b, &["--seed", "9"]));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let m = json(&a.join("manifest.json"));
    for f in ["corpus.jsonl", "grammar.json", "config.toml"] {
        assert!(m["files"][f].is_string(), "manifest lacks {f}");
    }

    let c = tmp.path().join("c");
    ok(&tiny("gen-corpus", &c, &["--seed", "9", "--intents", "31", "--set", "n_train=62"]));
    assert_eq!(json(&c.join("grammar.json"))["intents"].as_array().unwrap().len(), 31);
}

#[test]
fn echoed_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&tiny("gen-corpus", &a, &["--seed", "3", "--noise", "0.2"]));
    let cfg = s(&a.join("config.toml"));
    ok(&dslu(&["gen-corpus", "--out", &s(&b), "--config", &cfg]));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert!(fs::read_to_string(&cfg).unwrap().contains("noise_level = 0.2"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dslu(&["gen-corpus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("--out is required") && text(&o.stderr).contains("Usage"));

    assert_eq!(dslu(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dslu(&["gen-corpus", "--out", &s(tmp.path()), "--seed", "x"]).status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nnot_a_key = 3\n").unwrap();
    let o = dslu(&["gen-corpus", "--out", &s(&tmp.path().join("o")), "--config", &s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("not_a_key"));

    let o = dslu(&["gen-corpus", "--out", &s(&tmp.path().join("o")), "--set", "beam=wide"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dslu(&["gen-corpus", "--out", &s(&tmp.path().join("o")), "--config", &s(&tmp.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = dslu(&["train-stage1", "--out", &s(&tmp.path().join("o")), "--corpus", &s(&tmp.path().join("nope"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_failure_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, "x").unwrap();
    assert_eq!(tiny("gen-corpus", &file, &[]).status.code(), Some(1));

    let o = dslu(&["analyze", "--out", &s(&tmp.path().join("a")), "--predictions", &s(&tmp.path().join("none.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    let garbage = tmp.path().join("garbage.jsonl");
    fs::write(&garbage, "{not json\n").unwrap();
    let o = dslu(&["analyze", "--out", &s(&tmp.path().join("a")), "--predictions", &s(&garbage)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline() {
    let p = pipeline();
    let corpus = s(&p.corpus);
    let d = |n: &str| p.root.join(n);

    // prerequisites are checked and named
    let o = tiny("train-stage2", &d("x"), &["--corpus", &corpus]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("train-stage1"));
    let o = tiny("train-stage2", &d("x"), &["--corpus", &corpus, "--checkpoint", &s(&p.lm)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("stage-1"));
    let o = tiny("eval", &d("x"), &["--corpus", &corpus, "--checkpoint", &s(&p.s1)]);
    assert_eq!(o.status.code(), Some(2));

    // stage 1 reruns are bit-identical
    ok(&tiny("train-stage1", &d("s1b"), &["--corpus", &corpus, "--checkpoint", &s(&p.lm)]));
    assert_eq!(fs::read(&p.s1).unwrap(), fs::read(d("s1b/model.ckpt")).unwrap());
    let log = json(&d("s1/train_log.json"));
    assert_eq!(log["stage"], "stage1");

    // evaluation, both passes
    let ev = d("eval");
    ok(&tiny("eval", &ev, &["--corpus", &corpus, "--checkpoint", &s(&p.s2), "--both-passes", "--prefix-sweep", "0.5,1,inf"]));
    let table = fs::read_to_string(ev.join("confidence_buckets.csv")).unwrap();
    assert!(table.starts_with("label,support,first_accuracy,second_accuracy\n>=0.8,"));
    let curve = fs::read_to_string(ev.join("prefix_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let n_preds = fs::read_to_string(ev.join("predictions.jsonl")).unwrap().lines().count();
    assert_eq!(n_preds, 3 * 8);

    // one split only
    let one = d("one");
    ok(&tiny("eval", &one, &["--corpus", &corpus, "--checkpoint", &s(&p.s2), "--split", "test_unseen_phrasing"]));
    let summary = json(&one.join("summary.json"));
    assert_eq!(summary["splits"].as_object().unwrap().keys().collect::<Vec<_>>(), vec!["test_unseen_phrasing"]);
    assert_eq!(tiny("eval", &d("x"), &["--corpus", &corpus, "--checkpoint", &s(&p.s2), "--split", "nope"]).status.code(), Some(2));

    // routing mode
    let rt = d("route");
    ok(&tiny("eval", &rt, &["--corpus", &corpus, "--checkpoint", &s(&p.s2), "--route", "--threshold", "0.8", "--prefix", "2.0"]));
    for line in fs::read_to_string(rt.join("predictions.jsonl")).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let first = r["source"] == "first_pass";
        assert_eq!(first, r["confidence"].as_f64().unwrap() >= 0.8);
        if first {
            assert_eq!(r["t_pass2"], 0.0);
        }
        assert_eq!(r["prefix_seconds"], 2.0);
    }

    // analysis is idempotent and exports heatmaps
    let preds = s(&ev.join("predictions.jsonl"));
    let extra = ["--predictions", preds.as_str(), "--checkpoint", &s(&p.s2), "--corpus", &corpus];
    ok(&tiny("analyze", &d("an1"), &extra));
    ok(&tiny("analyze", &d("an2"), &extra));
    let m1 = fs::read(d("an1/manifest.json")).unwrap();
    assert_eq!(m1, fs::read(d("an2/manifest.json")).unwrap());
    let heat = json(&d("an1/heatmaps/heatmaps.json"));
    assert!(!heat.as_array().unwrap().is_empty());
    for entry in fs::read_dir(d("an1/heatmaps")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            for line in fs::read_to_string(&path).unwrap().lines().skip(1) {
                let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-9, "{} row sums to {sum}", path.display());
            }
        }
    }

    // analysis of routed predictions skips bucket tables but still summarizes
    ok(&tiny("analyze", &d("an3"), &["--predictions", &s(&rt.join("predictions.jsonl"))]));
    assert!(json(&d("an3/summary.json"))["accuracy"].is_number());
    let all_second = fs::read_to_string(rt.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .all(|l| !serde_json::from_str::<Value>(l).unwrap()["pass2_intent"].is_null());
    assert_eq!(d("an3/confidence_buckets.csv").exists(), all_second);
}

fn record(i: usize, conf: f64, p1: &str, p2: &str) -> String {
    serde_json::json!({
        "utt_id": format!("u{i:05}"),
        "intent_pred": if conf >= 0.8 { p1 } else { p2 },
        "intent_true": "a",
        "source": if conf >= 0.8 { "first_pass" } else { "second_pass" },
        "confidence": conf,
        "transcript_pred": ["w"],
        "t_pass1": 0.01,
        "t_pass2": 0.0,
        "t_total": 0.01,
        "prefix_seconds": 2.0,
        "transcript_true": ["w"],
        "pass1_intent": p1,
        "pass1_transcript": ["w"],
        "pass2_intent": p2,
        "pass2_transcript": ["w"],
        "audio_seconds": 3.0,
        "processed_seconds": 2.0
    })
    .to_string()
}

#[test]
fn table_fixture_gives_published_routed_accuracy() {
    // 1604 confident (1362 first-pass hits), 2600 not (2025 second-pass hits)
    let mut lines = Vec::new();
    for i in 0..1604 {
        lines.push(record(i, 0.9, if i < 1362 { "a" } else { "b" }, "b"));
    }
    for i in 0..2600 {
        lines.push(record(1604 + i, 0.5, "b", if i < 2025 { "a" } else { "b" }));
    }
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("p.jsonl");
    fs::write(&preds, lines.join("\n") + "\n").unwrap();
    let out = tmp.path().join("an");
    ok(&dslu(&["analyze", "--out", &s(&out), "--predictions", &s(&preds), "--threshold", "0.8"]));
    let routed = json(&out.join("summary.json"))["routed_accuracy"].as_f64().unwrap();
    assert!((routed - 80.6).abs() <= 0.05, "{routed}");
}
