use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blens::dataset::{self, FunctionRecord, Grouping, SplitSpec, StrictFilterConfig};
use blens::embedding::{BundleStore, ProviderSpec};
use blens::lord::{self, decode_traces, init_from_pretrained, Prediction, StopReason};
use blens::metrics::{self, BagOfWordsCosine, EvalOptions, EvalReport, FreeFunctionMode, FreeList, ScoredName};
use blens::params::{ModelConfig, ModelParams, Phase};
use blens::synth::{self, SynthSpec};
use blens::tokenizer::Vocabulary;
use blens::train::{self, EpochLog, Example, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::RunManifest;
use crate::{
    CalibrateArgs, DataArgs, EvaluateArgs, FinetuneArgs, GroupingArg, PredictArgs, PretrainArgs, ScoringFlags,
    SettingArg, SplitArgs, StrictFilterArgs, SynthArgs, TrainFlags, UsageError, VocabArgs,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| blens::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn load_corpus(path: &Path) -> Result<Vec<FunctionRecord>> {
    dataset::load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn provider_for(cfg: &ModelConfig) -> ProviderSpec {
    ProviderSpec {
        d_a: cfg.embed.d_a,
        d_b: cfg.embed.d_b,
        d_p: cfg.embed.d_p,
        ..ProviderSpec::default()
    }
}

fn check_pair(model: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    if model.meta.vocab_hash != vocab.content_hash() {
        return Err(usage("vocabulary does not match the one the model was trained with"));
    }
    if model.config.vocab_size != vocab.size() {
        return Err(usage(format!(
            "model expects {} ids but the vocabulary has {}",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

/// Records of `corpus` and their examples.
fn load_examples(data: &DataArgs, corpus: &Path, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<(Vec<FunctionRecord>, Vec<Example>)> {
    let records = load_corpus(corpus)?;
    if records.is_empty() {
        return Err(blens::Error::EmptyCorpus("corpus has no records").into());
    }
    let store = BundleStore::load(&data.bundles, &provider_for(cfg))
        .with_context(|| format!("loading bundles {}", data.bundles.display()))?;
    store.require(records.iter().map(|r| r.bundle_ref.as_str()))?;
    let examples = records
        .iter()
        .map(|r| Example {
            bundle: store.get(&r.bundle_ref).expect("checked").clone(),
            name: vocab.tokenize(&r.name, cfg.max_words),
        })
        .collect();
    Ok((records, examples))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        projects: a.projects,
        binaries_per_project: a.binaries,
        functions_per_binary: a.functions,
        seed: a.seed,
        provider: ProviderSpec {
            d_a: a.d_a,
            d_b: a.d_b,
            d_p: a.d_p,
            seed: a.provider_seed,
            ..ProviderSpec::default()
        },
        ..SynthSpec::default()
    };
    let corpus = synth::generate(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let corpus_path = a.out_dir.join("corpus.jsonl");
    dataset::save_corpus(&corpus_path, &corpus.records)?;
    let bundles_path = if a.packed {
        let p = a.out_dir.join("bundles.bin");
        corpus.bundles.save_packed(&p)?;
        p
    } else {
        let p = a.out_dir.join("bundles.jsonl");
        corpus.bundles.save_jsonl(&p)?;
        p
    };
    let mut m = RunManifest::new("synth", &spec)?.seed(a.seed);
    m.output(&corpus_path)?;
    m.output(&bundles_path)?;
    m.write_for(&a.out_dir)?;
    println!("wrote {} functions to {}", corpus.records.len(), a.out_dir.display());
    Ok(())
}

pub fn vocab(a: VocabArgs) -> Result<()> {
    let records = load_corpus(&a.corpus)?;
    let names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
    let mut vocab = Vocabulary::build(&names, a.size)?;
    if let Some(path) = &a.abbreviations {
        let table: HashMap<String, String> = read_json(path)?;
        vocab = vocab.with_abbreviations(table);
    }
    vocab.save(&a.out)?;
    let mut m = RunManifest::new("vocab", serde_json::json!({ "size": a.size }))?.config_hash(vocab.content_hash());
    m.input(&a.corpus)?;
    if let Some(path) = &a.abbreviations {
        m.input(path)?;
    }
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    println!("vocabulary of {} words written to {}", vocab.num_words(), a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let records = load_corpus(&a.corpus)?;
    let spec = SplitSpec {
        ratios: [a.ratios[0], a.ratios[1], a.ratios[2]],
        grouping: match a.grouping {
            GroupingArg::Binary => Grouping::Binary,
            GroupingArg::Project => Grouping::Project,
        },
        seed: a.seed,
    };
    let s = dataset::split(&records, &spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut m = RunManifest::new("split", &spec)?.seed(a.seed);
    m.input(&a.corpus)?;
    for (name, recs) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let p = a.out_dir.join(format!("{name}.jsonl"));
        dataset::save_corpus(&p, recs)?;
        m.output(&p)?;
        println!("{name}: {} functions", recs.len());
    }
    let manifest_path = a.out_dir.join("split.json");
    s.manifest.save(&manifest_path)?;
    m.output(&manifest_path)?;
    m.write_for(&a.out_dir)?;
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: TrainConfig,
}

fn run_config(flags: &TrainFlags) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &flags.config {
        Some(p) => read_json(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    cfg.train.seed = flags.seed;
    if let Some(v) = flags.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.train.lr = v;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn hash_json(value: &impl Serialize) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

fn loss_writer(flags: &TrainFlags, out: &Path) -> Result<(PathBuf, BufWriter<File>)> {
    let path = flags.loss_csv.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        out.with_file_name(name)
    });
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{}", EpochLog::CSV_HEADER)?;
    Ok((path, w))
}

fn log_epoch(w: &mut BufWriter<File>, log: &EpochLog, phase: &str) {
    // a failed CSV write must not abort a training run; it surfaces on flush
    let _ = writeln!(w, "{}", log.csv_row());
    let extra = match (log.val_f1, log.threshold) {
        (Some(f1), Some(t)) => format!(" val_f1 {f1:.4} T {t:.3}"),
        _ => String::new(),
    };
    eprintln!("{phase} epoch {:>4} loss {:.5}{extra}", log.epoch, log.loss);
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let run = run_config(&a.train)?;
    let vocab = load_vocab(&a.data.vocab)?;
    let cfg = run
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::desk(vocab.size(), a.max_words));
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.vocab_size != vocab.size() {
        return Err(usage(format!(
            "model config has vocab_size {} but the vocabulary has {} ids",
            cfg.vocab_size,
            vocab.size()
        )));
    }
    let (_, examples) = load_examples(&a.data, &a.data.corpus, &vocab, &cfg)?;
    let resolved = RunConfig {
        model: Some(cfg.clone()),
        train: run.train.clone(),
    };
    let run_hash = hash_json(&resolved)?;
    let mut model = ModelParams::init(cfg, Phase::Pretrain, &vocab.content_hash(), a.train.seed)?;
    model.meta.run_hash = run_hash.clone();
    let (csv_path, mut csv) = loss_writer(&a.train, &a.out)?;
    train::pretrain(&mut model, &examples, &run.train, |l| log_epoch(&mut csv, l, "pretrain"))?;
    csv.flush()?;
    drop(csv);
    model.save(&a.out)?;
    let mut m = RunManifest::new("pretrain", &resolved)?.seed(a.train.seed).config_hash(run_hash);
    for p in [&a.data.corpus, &a.data.bundles, &a.data.vocab] {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.output(&csv_path)?;
    m.write_for(&a.out)?;
    println!("pre-trained model written to {}", a.out.display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let run = run_config(&a.train)?;
    let vocab = load_vocab(&a.data.vocab)?;
    let pre = load_model(&a.from)?;
    if pre.meta.phase != Phase::Pretrain {
        return Err(usage(format!("{} is not a pre-training checkpoint", a.from.display())));
    }
    check_pair(&pre, &vocab)?;
    if let Some(m) = &run.model {
        if *m != pre.config {
            return Err(usage("model section of the run config differs from the pre-trained model"));
        }
    }
    let cfg = pre.config.clone();
    let (_, train_ex) = load_examples(&a.data, &a.data.corpus, &vocab, &cfg)?;
    let val_ex = match &a.val {
        Some(p) => load_examples(&a.data, p, &vocab, &cfg)?.1,
        None => Vec::new(),
    };
    let resolved = RunConfig {
        model: Some(cfg),
        train: run.train.clone(),
    };
    let run_hash = hash_json(&resolved)?;
    let mut model = init_from_pretrained(&pre, a.train.seed)?;
    model.meta.run_hash = run_hash.clone();
    let (csv_path, mut csv) = loss_writer(&a.train, &a.out)?;
    let summary = train::finetune(&mut model, &train_ex, &val_ex, &run.train, |l| log_epoch(&mut csv, l, "finetune"))?;
    csv.flush()?;
    drop(csv);
    model.save(&a.out)?;
    let mut m = RunManifest::new("finetune", &resolved)?.seed(a.train.seed).config_hash(run_hash);
    for p in [&a.from, &a.data.corpus, &a.data.bundles, &a.data.vocab] {
        m.input(p)?;
    }
    if let Some(p) = &a.val {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.output(&csv_path)?;
    m.write_for(&a.out)?;
    match (summary.threshold, summary.val_f1) {
        (Some(t), Some(f1)) => println!(
            "fine-tuned model (epoch {}, validation F1 {f1:.4}, threshold {t:.4}) written to {}",
            summary.best_epoch,
            a.out.display()
        ),
        _ => println!("fine-tuned model written to {}", a.out.display()),
    }
    Ok(())
}

fn load_finetuned(ckpt: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    let model = load_model(ckpt)?;
    if model.meta.phase != Phase::Finetune {
        return Err(usage(format!("{} is not a fine-tuned checkpoint", ckpt.display())));
    }
    check_pair(&model, vocab)?;
    Ok(model)
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let vocab = load_vocab(&a.data.vocab)?;
    let mut model = load_finetuned(&a.ckpt, &vocab)?;
    let (_, val) = load_examples(&a.data, &a.data.corpus, &vocab, &model.config)?;
    let grid = lord::threshold_grid(a.grid_points);
    let cal = train::calibrate(&model, &val, &grid)?;
    match &a.report {
        Some(p) => write_json(p, &cal)?,
        None => println!("{}", serde_json::to_string_pretty(&cal)?),
    }
    eprintln!("threshold {:.4} validation F1 {:.4}", cal.threshold, cal.f1);
    if a.write {
        model.meta.threshold = Some(cal.threshold);
        model.meta.validation_f1 = Some(cal.f1);
        model.save(&a.ckpt)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceStep {
    step: usize,
    position: usize,
    word: String,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    key: String,
    name: String,
    words: Vec<String>,
    threshold: f64,
    stop_reason: StopReason,
    trace: Vec<TraceStep>,
    vocab_hash: String,
    config_hash: String,
}

fn word_string(vocab: &Vocabulary, id: u32) -> String {
    vocab.token(id).unwrap_or("[UNK]").to_string()
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let vocab = load_vocab(&a.data.vocab)?;
    let model = load_finetuned(&a.ckpt, &vocab)?;
    let t = match (a.threshold, model.meta.threshold) {
        (Some(t), _) => t,
        (None, Some(t)) => t,
        (None, None) => match a.setting {
            SettingArg::CrossBinary => lord::CROSS_BINARY_THRESHOLD,
            SettingArg::CrossProject => lord::CROSS_PROJECT_THRESHOLD,
        },
    };
    if !(t >= 0.0) {
        return Err(usage(format!("threshold must be non-negative, got {t}")));
    }
    let (records, examples) = load_examples(&a.data, &a.data.corpus, &vocab, &model.config)?;
    let bundles: Vec<_> = examples.iter().map(|e| &e.bundle).collect();
    let traces = decode_traces(&model, &bundles)?;
    let n = model.config.max_words;
    let vocab_hash = vocab.content_hash();
    let rows = records.iter().zip(&traces).map(|(r, full)| {
        let p = Prediction::from_trace(full, n, t);
        let words: Vec<String> = p.words.iter().map(|&w| word_string(&vocab, w)).collect();
        PredictionRecord {
            key: r.key(),
            name: words.join("_"),
            words,
            threshold: t,
            stop_reason: p.stop_reason,
            trace: p
                .trace
                .iter()
                .map(|s| TraceStep {
                    step: s.step,
                    position: s.position,
                    word: word_string(&vocab, s.word),
                    confidence: s.confidence,
                })
                .collect(),
            vocab_hash: vocab_hash.clone(),
            config_hash: model.meta.config_hash.clone(),
        }
    });
    write_jsonl(&a.out, rows)?;
    let mut m = RunManifest::new("predict", serde_json::json!({ "threshold": t }))?.config_hash(model.meta.config_hash.clone());
    for p in [&a.ckpt, &a.data.corpus, &a.data.bundles, &a.data.vocab] {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    println!("{} predictions at threshold {t:.4} written to {}", records.len(), a.out.display());
    Ok(())
}

fn load_predictions(path: &Path, vocab: &Vocabulary) -> Result<(HashMap<String, Vec<String>>, String)> {
    let preds: Vec<PredictionRecord> = read_jsonl(path)?;
    let hash = vocab.content_hash();
    let mut out = HashMap::with_capacity(preds.len());
    let mut config_hash = String::new();
    for p in preds {
        if p.vocab_hash != hash {
            return Err(usage(format!("prediction {} was made with a different vocabulary", p.key)));
        }
        config_hash = p.config_hash;
        if out.insert(p.key.clone(), p.words).is_some() {
            return Err(blens::Error::Malformed(format!("duplicate prediction for {}", p.key)).into());
        }
    }
    Ok((out, config_hash))
}

fn truth_words(vocab: &Vocabulary, raw: &str) -> Result<Vec<String>> {
    Ok(vocab.words_of(&vocab.tokenize(raw, usize::MAX))?)
}

fn free_list(flags: &ScoringFlags) -> Result<FreeList> {
    Ok(match &flags.free_list {
        Some(p) => FreeList::new(read_json::<Vec<String>>(p)?),
        None => FreeList::default(),
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    vocab_hash: String,
    config_hash: String,
    report: &'a EvalReport,
}

fn scored(records: &[FunctionRecord], truths: Vec<Vec<String>>, preds: &HashMap<String, Vec<String>>) -> Result<Vec<ScoredName>> {
    let missing: Vec<String> = records
        .iter()
        .map(FunctionRecord::key)
        .filter(|k| !preds.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(blens::Error::MissingPredictions(missing).into());
    }
    Ok(records
        .iter()
        .zip(truths)
        .map(|(r, truth)| ScoredName {
            raw_name: r.name.clone(),
            pred: preds[&r.key()].clone(),
            truth,
        })
        .collect())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let (preds, config_hash) = load_predictions(&a.pred, &vocab)?;
    let records = load_corpus(&a.truth)?;
    let truths = records.iter().map(|r| truth_words(&vocab, &r.name)).collect::<Result<_>>()?;
    let items = scored(&records, truths, &preds)?;
    let free_mode: FreeFunctionMode = a.free_mode.parse().map_err(|e: blens::Error| usage(e.to_string()))?;
    let report = metrics::evaluate(
        &items,
        &EvalOptions {
            beta: a.scoring.beta,
            free_mode,
            free_list: free_list(&a.scoring)?,
            similarity: a.scoring.similarity.then_some(&BagOfWordsCosine as _),
        },
    )?;
    write_json(
        &a.report,
        &ReportFile {
            vocab_hash: vocab.content_hash(),
            config_hash: config_hash.clone(),
            report: &report,
        },
    )?;
    let mut m = RunManifest::new("evaluate", serde_json::json!({ "beta": a.scoring.beta, "free_mode": free_mode }))?
        .config_hash(config_hash);
    for p in [&a.pred, &a.truth, &a.vocab] {
        m.input(p)?;
    }
    if let Some(p) = &a.scoring.free_list {
        m.input(p)?;
    }
    m.output(&a.report)?;
    m.write_for(&a.report)?;
    println!(
        "P {:.4} R {:.4} F1 {:.4} ROUGE-L {:.4} BLEU {:.4} over {} functions",
        report.precision, report.recall, report.f1, report.rouge_l, report.bleu, report.functions
    );
    Ok(())
}

#[derive(Serialize)]
struct TruthRow<'a> {
    key: String,
    words: &'a [String],
}

pub fn strict_filter(a: StrictFilterArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let (preds, config_hash) = load_predictions(&a.pred, &vocab)?;
    let train = load_corpus(&a.train)?;
    let test = load_corpus(&a.test)?;
    let excluded: Vec<String> = read_json(&a.excluded)?;
    let unknown: Vec<&String> = excluded.iter().filter(|w| vocab.id(w).is_none()).collect();
    if !unknown.is_empty() {
        return Err(usage(format!("excluded words not in the vocabulary: {unknown:?}")));
    }
    let truths: Vec<Vec<String>> = test.iter().map(|r| truth_words(&vocab, &r.name)).collect::<Result<_>>()?;
    let cfg = StrictFilterConfig::from_training(&train, excluded.clone(), free_list(&a.scoring)?);
    let out = dataset::strict_filter(&test, &truths, &preds, &cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let kept_path = a.out_dir.join("test.filtered.jsonl");
    dataset::save_corpus(&kept_path, &out.records)?;
    let truth_path = a.out_dir.join("truths.filtered.jsonl");
    write_jsonl(
        &truth_path,
        out.records.iter().zip(&out.truths).map(|(r, w)| TruthRow { key: r.key(), words: w }),
    )?;
    let items = scored(&out.records, out.truths.clone(), &preds)?;
    let report = metrics::evaluate(
        &items,
        &EvalOptions {
            beta: a.scoring.beta,
            free_mode: FreeFunctionMode::Discard,
            free_list: cfg.free_list.clone(),
            similarity: a.scoring.similarity.then_some(&BagOfWordsCosine as _),
        },
    )?;
    let report_path = a.out_dir.join("strict_report.json");
    write_json(
        &report_path,
        &serde_json::json!({
            "vocab_hash": vocab.content_hash(),
            "config_hash": config_hash,
            "excluded_words": excluded,
            "removal": out.report,
            "evaluation": report,
        }),
    )?;
    let mut m = RunManifest::new("strict-filter", serde_json::json!({ "beta": a.scoring.beta }))?.config_hash(config_hash);
    for p in [&a.train, &a.test, &a.pred, &a.vocab, &a.excluded] {
        m.input(p)?;
    }
    for p in [&kept_path, &truth_path, &report_path] {
        m.output(p)?;
    }
    m.write_for(&a.out_dir)?;
    let seen: HashSet<&str> = out.records.iter().map(|r| r.name.as_str()).collect();
    println!(
        "removed {} (hash {}, free {}, shared {}); {} functions ({} distinct names) remain; F1 {:.4}",
        out.report.total(),
        out.report.hash_duplicates,
        out.report.free_functions,
        out.report.shared_names,
        out.records.len(),
        seen.len(),
        report.f1
    );
    Ok(())
}
