mod common;

use std::sync::OnceLock;

use common::{config, corpus, model};
use dslu::corpus::{Corpus, Split};
use dslu::eval::{
    bucket_by_confidence, bucket_by_wer, export_heatmaps, intent_accuracy, prefix_sweep, record_wer,
    routed_accuracy, wer_bucket_index, write_heatmaps, WER_EDGES,
};
use dslu::infer::{evaluate_both, infer_first_pass, InferenceOptions, PredictionRecord, Source};
use dslu::model::TwoPassModel;
use dslu::train::{train_stage1, train_stage2, Stage};
use proptest::prelude::*;

fn trained() -> &'static (Corpus, TwoPassModel) {
    static CELL: OnceLock<(Corpus, TwoPassModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = corpus(31);
        let mut m = model(&c, 31);
        train_stage1(&mut m, &c, &config(Stage::Stage1, 3)).unwrap();
        train_stage2(&mut m, &c, &config(Stage::Stage2, 1)).unwrap();
        (c, m)
    })
}

fn records() -> Vec<PredictionRecord> {
    let (c, m) = trained();
    let opts = InferenceOptions::default();
    [Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker]
        .iter()
        .flat_map(|&s| c.split(s))
        .map(|u| PredictionRecord::new(u, &evaluate_both(m, &u.frames, 0.6, None, &opts).unwrap()))
        .collect()
}

#[test]
fn heatmap_rows_are_distributions() {
    let (c, m) = trained();
    let u = c.split(Split::TestSeen)[0];
    let words = m.vocab.encode_words(&u.transcript).unwrap();
    let maps = export_heatmaps(m, &u.frames, &words).unwrap();
    assert_eq!(maps.len(), m.config.n_heads);
    for h in &maps {
        assert_eq!(h.key_labels.len(), h.boundary + words.len());
        assert_eq!(&h.key_labels[h.boundary..], u.transcript.as_slice());
        for r in 0..h.rows() {
            let s: f64 = h.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((h.acoustic_mass[r] + h.semantic_mass[r] - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn heatmap_files_parse_back() {
    let (c, m) = trained();
    let u = c.split(Split::Dev)[0];
    let maps = export_heatmaps(m, &u.frames, &[]).unwrap();
    assert_eq!(maps[0].key_labels.last().unwrap(), "<pad>");
    let dir = tempfile::tempdir().unwrap();
    let files = write_heatmaps(dir.path(), &maps).unwrap();
    assert_eq!(files.len(), maps.len() + 1);
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), maps[0].cols() + 1);
    for line in lines {
        let s: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(files.last().unwrap()).unwrap()).unwrap();
    assert_eq!(sidecar[0]["boundary"], maps[0].boundary);
}

#[test]
fn wer_buckets_match_filter_recount() {
    let rs = records();
    let b = bucket_by_wer(&rs, &WER_EDGES).unwrap();
    assert_eq!(b.table.total_support(), rs.len());
    for (k, row) in b.table.rows.iter().enumerate() {
        let lo = WER_EDGES[k];
        let hi = if k + 2 == WER_EDGES.len() { f64::INFINITY } else { WER_EDGES[k + 1] };
        let members: Vec<&PredictionRecord> = rs
            .iter()
            .filter(|r| {
                let w = record_wer(r).unwrap();
                w >= lo && w < hi
            })
            .collect();
        assert_eq!(row.support, members.len());
        if !members.is_empty() {
            let first = members.iter().filter(|r| r.pass1_intent == r.intent_true).count();
            assert!((row.first_accuracy.unwrap() - 100.0 * first as f64 / members.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn routed_accuracy_equals_per_utterance_recount() {
    let rs = records();
    for t in [0.0, 0.3, 0.6, 0.9, 1.0] {
        let table = bucket_by_confidence(&rs, t).unwrap();
        let recount = rs
            .iter()
            .filter(|r| {
                let pred = if r.confidence >= t { &r.pass1_intent } else { r.pass2_intent.as_ref().unwrap() };
                *pred == r.intent_true
            })
            .count();
        assert!((routed_accuracy(&table).unwrap() - 100.0 * recount as f64 / rs.len() as f64).abs() < 1e-9);
    }
    // The records were produced at threshold 0.6, so their own routing agrees.
    let table = bucket_by_confidence(&rs, 0.6).unwrap();
    let pairs: Vec<(&str, &str)> = rs.iter().map(|r| (r.intent_pred.as_str(), r.intent_true.as_str())).collect();
    assert!((routed_accuracy(&table).unwrap() - intent_accuracy(&pairs).unwrap()).abs() < 1e-9);
    assert!(rs.iter().all(|r| (r.source == Source::FirstPass) == (r.confidence >= 0.6)));
}

#[test]
fn prefix_beyond_duration_matches_full_audio() {
    let (c, m) = trained();
    let utts = c.split(Split::TestSeen);
    let longest = utts.iter().map(|u| u.duration_seconds()).fold(0.0, f64::max);
    let opts = InferenceOptions::default();
    let curve = prefix_sweep(m, &utts, &[0.5, 1.0, longest + 1.0], &opts, 1).unwrap();
    let full = utts
        .iter()
        .filter(|u| infer_first_pass(m, &u.frames, None, &opts).unwrap().pass.intent == u.intent)
        .count();
    assert_eq!(curve.points[2].accuracy, 100.0 * full as f64 / utts.len() as f64);
    assert!(curve.points.iter().all(|p| p.mean_wall_seconds.unwrap() > 0.0));
    assert!(prefix_sweep(m, &utts, &[2.0, 1.0], &opts, 1).is_err());
}

#[test]
fn wer_bucket_index_covers_every_rate() {
    assert_eq!(wer_bucket_index(&WER_EDGES, 0.0), Some(0));
    assert_eq!(wer_bucket_index(&WER_EDGES, 4.999), Some(0));
    assert_eq!(wer_bucket_index(&WER_EDGES, 5.0), Some(1));
    assert_eq!(wer_bucket_index(&WER_EDGES, 100.0), Some(3));
    assert_eq!(wer_bucket_index(&WER_EDGES, 250.0), Some(3));
}

proptest! {
    #[test]
    fn accuracy_matches_recount(labels in proptest::collection::vec((0u8..5, 0u8..5), 1..1000)) {
        let pairs: Vec<(String, String)> = labels.iter().map(|(p, g)| (format!("i{p}"), format!("i{g}"))).collect();
        let mut correct = 0;
        for (p, g) in &labels {
            if p == g {
                correct += 1;
            }
        }
        let want = correct as f64 * 100.0 / labels.len() as f64;
        prop_assert!((intent_accuracy(&pairs).unwrap() - want).abs() < 1e-12);
    }
}
