use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;
use sha2::{Digest, Sha256};

use dslu::corpus::{build_grammar_with, generate_corpus, read_corpus, write_corpus, Corpus, Split, Utterance};
use dslu::eval::{
    accuracy_gap, bucket_by_confidence, bucket_by_wer, export_heatmaps, intent_accuracy, prefix_sweep, routed_accuracy,
    write_heatmaps, WER_EDGES,
};
use dslu::infer::{
    evaluate_both, measure_latency, parallel_map, read_predictions, report_from_rows, route, write_predictions,
    LatencyRow, PredictionRecord, Source,
};
use dslu::model::{load_checkpoint, save_checkpoint, TwoPassModel, Vocabulary};
use dslu::train::{pretrain_semantic_encoder, train_stage1, train_stage2, Stage};

use crate::settings::Settings;
use crate::{AnalyzeArgs, CliError, EvalArgs, TrainArgs};

const MANIFEST: &str = "manifest.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Everything a command writes goes through here, so the manifest covers it.
pub struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Output { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
        self.files.push(p);
        Ok(())
    }

    /// Records a file some library call already wrote.
    pub fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn echo_config(&mut self, s: &Settings) -> Result<(), CliError> {
        let text = s.to_toml();
        println!("# resolved config\n{text}");
        self.write("config.toml", text.as_bytes())
    }

    /// Writes `manifest.json`: SHA-256 of every output, keyed by path relative
    /// to the output directory.
    pub fn finish(mut self) -> Result<(), CliError> {
        self.files.sort();
        self.files.dedup();
        let mut hashes = BTreeMap::new();
        for p in &self.files {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, digest);
        }
        let text = serde_json::to_string_pretty(&json!({ "files": hashes })).expect("manifest serializes");
        let p = self.path(MANIFEST);
        fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
    }
}

pub fn gen_corpus(s: &Settings, out: &mut Output) -> Result<(), CliError> {
    let grammar = build_grammar_with(s.seed, &s.grammar_config()).map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = generate_corpus(&grammar, &s.corpus_config(), s.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    for p in write_corpus(&out.dir, &corpus)? {
        out.track(p);
    }
    let counts: Vec<String> =
        Split::ALL.iter().map(|&sp| format!("{sp} {}", corpus.splits.ids(sp).len())).collect();
    println!(
        "corpus: {} intents, {} words, {}; {} unlabeled sentences",
        grammar.intents.len(),
        grammar.lexicon.len(),
        counts.join(", "),
        corpus.splits.unlabeled_text.len()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("corpus directory {} not found; run gen-corpus first", dir.display())));
    }
    Ok(read_corpus(dir)?)
}

fn load_model(path: &Path, needed: &str) -> Result<TwoPassModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found; {needed}", path.display())));
    }
    Ok(load_checkpoint(path)?.0)
}

pub fn train(stage: Stage, args: &TrainArgs, s: &Settings, out: &mut Output) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let need_stage1 = "train-stage2 needs a stage-1 checkpoint; run train-stage1 and pass its model.ckpt";
    let mut model = match (&args.checkpoint, stage) {
        (Some(p), _) => load_model(p, "pass a checkpoint written by an earlier stage")?,
        (None, Stage::Stage2) => return Err(CliError::Usage(need_stage1.into())),
        (None, _) => {
            let config = dslu::model::ModelConfig { feat_dim: corpus.grammar.feat_dim(), ..s.model_config() };
            TwoPassModel::new(config, Vocabulary::from_grammar(&corpus.grammar)?, s.seed)?
        }
    };
    if stage == Stage::Stage2 && !model.stages.stage1 {
        return Err(CliError::Usage(format!("{need_stage1} (this checkpoint has not been through stage 1)")));
    }
    let cfg = s.train_config(stage);
    let log = match stage {
        Stage::PretrainLm => pretrain_semantic_encoder(&mut model, &corpus.splits.unlabeled_text, &cfg)?,
        Stage::Stage1 => train_stage1(&mut model, &corpus, &cfg)?,
        Stage::Stage2 => train_stage2(&mut model, &corpus, &cfg)?,
    };
    let ckpt = out.path("model.ckpt");
    save_checkpoint(&model, log.optimizer.as_ref(), &ckpt)?;
    out.track(ckpt);
    out.write("train_log.json", log.to_json()?.as_bytes())?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    for e in &log.epochs {
        let dev = e.dev_intent_accuracy.map(|a| format!(" dev accuracy {:.1}%", 100.0 * a)).unwrap_or_default();
        println!("{stage} epoch {}: loss {:.4}{dev}", e.epoch, e.mean_loss);
    }
    println!("{stage}: {} steps, checksum {}", log.steps, log.final_checksum);
    Ok(())
}

fn split_list(names: &[String]) -> Result<Vec<Split>, CliError> {
    if names.is_empty() {
        return Ok(vec![Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker]);
    }
    names.iter().map(|n| Split::from_str(n).map_err(|e| CliError::Usage(e.to_string()))).collect()
}

fn pct<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64, CliError> {
    Ok(intent_accuracy(pairs)?)
}

pub fn eval(args: &EvalArgs, s: &Settings, out: &mut Output) -> Result<(), CliError> {
    let splits = split_list(&args.splits)?;
    let corpus = load_corpus(&args.corpus)?;
    let model = load_model(&args.checkpoint, "eval needs a checkpoint from train-stage2")?;
    if !model.stages.stage2 {
        return Err(CliError::Usage(format!(
            "{} has not been through train-stage2; eval needs a stage-2 checkpoint",
            args.checkpoint.display()
        )));
    }
    let opts = s.inference();
    let prefix = s.prefix_seconds();
    let utts: Vec<&Utterance> = splits.iter().flat_map(|&sp| corpus.split(sp)).collect();
    if utts.is_empty() {
        return Err(CliError::Runtime("the requested splits are empty".into()));
    }
    let preds = parallel_map(&utts, s.workers, |u| {
        if args.route {
            route(&model, &u.frames, s.threshold, prefix, &opts)
        } else {
            evaluate_both(&model, &u.frames, s.threshold, prefix, &opts)
        }
    })?;
    let records: Vec<PredictionRecord> = utts.iter().zip(&preds).map(|(u, p)| PredictionRecord::new(u, p)).collect();
    let path = out.path("predictions.jsonl");
    write_predictions(&path, &records)?;
    out.track(path);
    out.write("latency.json", serde_json::to_string_pretty(&measure_latency(&preds, None)?).unwrap().as_bytes())?;

    let mut per_split = BTreeMap::new();
    for &sp in &splits {
        let rs: Vec<&PredictionRecord> = records.iter().filter(|r| corpus.split_of(&r.utt_id) == Some(sp)).collect();
        if rs.is_empty() {
            continue;
        }
        let routed: Vec<_> = rs.iter().map(|r| (r.intent_pred.as_str(), r.intent_true.as_str())).collect();
        let first: Vec<_> = rs.iter().map(|r| (r.pass1_intent.as_str(), r.intent_true.as_str())).collect();
        let second = if args.route {
            None
        } else {
            let pairs: Vec<_> =
                rs.iter().map(|r| (r.pass2_intent.as_deref().unwrap_or(""), r.intent_true.as_str())).collect();
            Some(pct(&pairs)?)
        };
        let row = json!({ "n": rs.len(), "accuracy": pct(&routed)?, "first_pass_accuracy": pct(&first)?, "second_pass_accuracy": second });
        println!("{sp}: {row}");
        per_split.insert(sp.as_str(), row);
    }
    let summary = json!({
        "mode": if args.route { "route" } else { "both_passes" },
        "threshold": s.threshold,
        "prefix_seconds": prefix,
        "splits": per_split,
    });
    out.write("summary.json", serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;

    if args.both_passes {
        let table = bucket_by_confidence(&records, s.threshold)?;
        print!("confidence buckets\n{}", table.to_csv());
        out.write("confidence_buckets.csv", table.to_csv().as_bytes())?;
        out.write("wer_buckets.csv", bucket_by_wer(&records, &WER_EDGES)?.table.to_csv().as_bytes())?;
    }
    if !args.prefix_sweep.is_empty() {
        let curve = prefix_sweep(&model, &utts, &args.prefix_sweep, &opts, s.workers)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        print!("prefix curve\n{}", curve.to_csv());
        out.write("prefix_curve.csv", curve.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs, s: &Settings, out: &mut Output) -> Result<(), CliError> {
    let records = read_predictions(&args.predictions)?;
    if records.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no predictions", args.predictions.display())));
    }
    let chosen: Vec<_> = records.iter().map(|r| (r.intent_pred.as_str(), r.intent_true.as_str())).collect();
    let first: Vec<_> = records.iter().map(|r| (r.pass1_intent.as_str(), r.intent_true.as_str())).collect();
    let both = records.iter().all(|r| r.pass2_intent.is_some());
    let mut summary = json!({
        "n": records.len(),
        "threshold": s.threshold,
        "accuracy": pct(&chosen)?,
        "first_pass_accuracy": pct(&first)?,
    });
    if both {
        let second: Vec<_> =
            records.iter().map(|r| (r.pass2_intent.as_deref().unwrap_or(""), r.intent_true.as_str())).collect();
        let conf = bucket_by_confidence(&records, s.threshold)?;
        let wers = bucket_by_wer(&records, &WER_EDGES)?;
        summary["second_pass_accuracy"] = json!(pct(&second)?);
        summary["routed_accuracy"] = json!(routed_accuracy(&conf)?);
        summary["fraction_wer_below_5"] = json!(wers.fraction_below_5);
        summary["gap_wer_below_5"] = json!(accuracy_gap(&records, 0.0, 5.0)?);
        summary["gap_wer_15_and_above"] = json!(accuracy_gap(&records, 15.0, f64::INFINITY)?);
        out.write("confidence_buckets.csv", conf.to_csv().as_bytes())?;
        out.write("wer_buckets.csv", wers.table.to_csv().as_bytes())?;
    } else {
        eprintln!("note: some predictions lack a second pass; skipping bucket tables (run eval --both-passes)");
    }
    let rows: Vec<LatencyRow> = records
        .iter()
        .map(|r| LatencyRow {
            t_pass1: r.t_pass1,
            t_pass2: r.t_pass2,
            t_total: r.t_total,
            prefix_seconds: r.prefix_seconds,
            processed_seconds: r.processed_seconds,
            second_pass: r.source == Source::SecondPass,
        })
        .collect();
    out.write("latency.json", serde_json::to_string_pretty(&report_from_rows(rows, None)?).unwrap().as_bytes())?;

    if let (Some(ckpt), Some(dir)) = (&args.checkpoint, &args.corpus) {
        let corpus = load_corpus(dir)?;
        let model = load_model(ckpt, "pass a trained checkpoint for heatmaps")?;
        let id = args.heatmap_utt.clone().unwrap_or_else(|| records[0].utt_id.clone());
        let utt = corpus
            .utterances
            .get(&id)
            .ok_or_else(|| CliError::Usage(format!("utterance `{id}` is not in {}", dir.display())))?;
        let record = records.iter().find(|r| r.utt_id == id);
        let words = record.map_or(&utt.transcript, |r| &r.pass1_transcript);
        let tokens = model.vocab.encode_words(words)?;
        let maps = export_heatmaps(&model, &utt.frames, &tokens)?;
        for p in write_heatmaps(&out.path("heatmaps"), &maps)? {
            out.track(p);
        }
        summary["heatmap_utterance"] = json!(id);
    }
    let text = serde_json::to_string_pretty(&summary).unwrap();
    println!("{text}");
    out.write("summary.json", text.as_bytes())?;
    Ok(())
}
