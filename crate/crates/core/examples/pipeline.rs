//! Trains (or loads) a model for one seed and prints the analyses.
//!
//! `cargo run --release -p deliberation-slu --example pipeline -- <seed> [checkpoint]`

use std::path::PathBuf;
use std::time::Instant;

use dslu::corpus::{build_grammar_with, generate_corpus, CorpusConfig, GrammarConfig, Split, Utterance};
use dslu::eval::{accuracy_gap, bucket_by_wer, intent_accuracy, WER_EDGES};
use dslu::infer::{evaluate_both, infer_first_pass, route, InferenceOptions, PredictionRecord, Source};
use dslu::model::{load_checkpoint, save_checkpoint, ModelConfig, TwoPassModel, Vocabulary};
use dslu::train::{pretrain_semantic_encoder, train_stage1, train_stage2, Stage, TrainConfig};

fn main() -> dslu::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(1, |s| s.parse().expect("seed"));
    let ckpt = PathBuf::from(args.get(2).cloned().unwrap_or(format!("/tmp/dslu-seed{seed}.ckpt")));
    let grammar = build_grammar_with(seed, &GrammarConfig::default())?;
    let corpus = generate_corpus(&grammar, &CorpusConfig::default(), seed)?;
    let model = if ckpt.exists() {
        load_checkpoint(&ckpt)?.0
    } else {
        let t0 = Instant::now();
        let mut model = TwoPassModel::new(ModelConfig::default(), Vocabulary::from_grammar(&grammar)?, seed)?;
        let cfg = |stage| TrainConfig { seed, ..TrainConfig::for_stage(stage) };
        pretrain_semantic_encoder(&mut model, &corpus.splits.unlabeled_text, &cfg(Stage::PretrainLm))?;
        train_stage1(&mut model, &corpus, &cfg(Stage::Stage1))?;
        train_stage2(&mut model, &corpus, &cfg(Stage::Stage2))?;
        save_checkpoint(&model, None, &ckpt)?;
        eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());
        model
    };
    let opts = InferenceOptions::default();
    let tests: Vec<&Utterance> =
        [Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker].iter().flat_map(|&s| corpus.split(s)).collect();

    // both passes, full audio
    let mut records = Vec::new();
    for u in &tests {
        records.push(PredictionRecord::new(u, &evaluate_both(&model, &u.frames, 1.0, None, &opts)?));
    }
    for split in [Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker] {
        let rs: Vec<_> = records.iter().filter(|r| corpus.split_of(&r.utt_id) == Some(split)).collect();
        let p1: Vec<_> = rs.iter().map(|r| (r.pass1_intent.as_str(), r.intent_true.as_str())).collect();
        let p2: Vec<_> = rs.iter().map(|r| (r.pass2_intent.as_deref().unwrap(), r.intent_true.as_str())).collect();
        println!("{}: first {:.2} second {:.2}", split.as_str(), intent_accuracy(&p1)?, intent_accuracy(&p2)?);
    }
    let b = bucket_by_wer(&records, &WER_EDGES)?;
    print!("{}", b.table.to_csv());
    println!(
        "below5 {:.3} gap<5 {:?} gap>=15 {:?}",
        b.fraction_below_5,
        accuracy_gap(&records, 0.0, 5.0)?,
        accuracy_gap(&records, 15.0, f64::INFINITY)?
    );

    // prefix tradeoff on long utterances
    let long: Vec<&&Utterance> = tests.iter().filter(|u| u.duration_seconds() >= 3.0).collect();
    for p in [Some(1.0), Some(2.0), None] {
        let t = Instant::now();
        let mut hits = 0;
        for u in &long {
            hits += usize::from(infer_first_pass(&model, &u.frames, p, &opts)?.pass.intent == u.intent);
        }
        println!(
            "prefix {p:?}: n {} acc {:.2} mean {:.5}s",
            long.len(),
            100.0 * hits as f64 / long.len() as f64,
            t.elapsed().as_secs_f64() / long.len() as f64
        );
    }

    // routing sweep on dev and test at 2 s
    for (name, set) in [("dev", corpus.split(Split::Dev)), ("test", tests.clone())] {
        for th in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0] {
            let mut hits = 0;
            let mut first_hits = 0;
            let mut total = 0.0;
            let mut second = 0;
            for u in &set {
                let r = route(&model, &u.frames, th, Some(2.0), &opts)?;
                hits += usize::from(r.intent == u.intent);
                first_hits += usize::from(r.pass1_intent == u.intent);
                total += r.timings.t_total;
                second += usize::from(r.source == Source::SecondPass);
            }
            let n = set.len() as f64;
            println!(
                "{name} th {th}: routed {:.2} first {:.2} second-frac {:.2} mean {:.5}s",
                100.0 * hits as f64 / n,
                100.0 * first_hits as f64 / n,
                second as f64 / n,
                total / n
            );
        }
    }
    Ok(())
}
