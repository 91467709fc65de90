//! One function per subcommand. Each returns the artifacts it wrote; the
//! manifest is written afterwards whether or not the run succeeded.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use extmind::eval::{
    kv_dataset, layer_ablation, perplexity_eval, read_jsonl, retrieval_bench, timing_bench, AppearanceBuckets,
    EvalRecord, KvDatasetSpec, RetrievalReport, TimingOptions,
};
use extmind::generation::{generate, regenerate_uncertain};
use extmind::memory::MemoryBank;
use extmind::model::{extra_windows, Model, Weights};
use extmind::train::{procedural_corpus, train_toy_with, QUERY};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, Task};
use crate::error::{CliError, Result};
use crate::plots;
use crate::vocab::Vocab;
use crate::Command;

pub const WEIGHTS_FILE: &str = "model.weights";
pub const VOCAB_FILE: &str = "model.vocab";
pub const BANK_FILE: &str = "document.bank";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    status: String,
    seed: Option<u64>,
    threads: usize,
    artifacts: Vec<String>,
    config: &'a RunConfig,
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Run {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    fn plot(&mut self, name: &str, draw: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if self.cfg.bench.plots.0 {
            draw(&self.dir.join(name))?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    fn rng(&self, what: &str) -> Result<ChaCha8Rng> {
        Ok(ChaCha8Rng::seed_from_u64(self.cfg.seed(what)?))
    }
}

/// Attaches `path` to bare I/O errors from the engine.
fn at(path: &Path) -> impl Fn(extmind::Error) -> CliError + '_ {
    move |e| match e {
        extmind::Error::Io(io) => CliError::io(path, io),
        e => e.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("{key} is not set")))
}

pub fn run(command: &Command, cfg: RunConfig) -> Result<()> {
    if cfg.threads > 0 {
        // a second build in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let dir = cfg.output_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut run = Run { cfg, dir, artifacts: Vec::new() };
    let result = match command {
        Command::TrainToy => train_toy(&mut run),
        Command::CacheBuild { .. } => cache_build(&mut run),
        Command::Generate { .. } => generate_cmd(&mut run),
        Command::BenchPpl { .. } => bench_ppl(&mut run),
        Command::BenchRetrieval { .. } => bench_retrieval(&mut run),
        Command::BenchTiming { .. } => bench_timing(&mut run),
        Command::AblateLayers { .. } => ablate_layers(&mut run),
    };
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        status: result.as_ref().map_or_else(|e| format!("error: {e}"), |_| "ok".to_string()),
        seed: run.cfg.seed,
        threads: rayon::current_num_threads(),
        artifacts: run.artifacts.clone(),
        config: &run.cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = run.dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    result
}

fn load_model(run: &mut Run) -> Result<(Model, Vocab)> {
    let wpath = required(&run.cfg.model.weights, "model.weights")?;
    let vpath = required(&run.cfg.model.vocab, "model.vocab")?;
    let weights = Weights::load(wpath).map_err(at(wpath))?;
    let vocab = Vocab::load(vpath)?;
    if vocab.size() != weights.config.vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            weights.config.vocab_size
        )));
    }
    let model = Model::new(weights)?;
    run.cfg.resolve(model.config(), &vocab);
    Ok((model, vocab))
}

fn train_toy(run: &mut Run) -> Result<()> {
    let mut rng = run.rng("training")?;
    let t = run.cfg.train.clone();
    let (vocab, corpus) = match t.task {
        Task::KvLookup => (Vocab::kv(extmind::train::KvVocab::new(t.n_keys, t.n_values)), None),
        Task::CharLm => {
            let corpus = match &t.corpus {
                Some(p) => read_text(p)?,
                None => procedural_corpus(t.corpus_chars, &mut rng),
            };
            (Vocab::chars(&corpus), Some(corpus))
        }
    };
    let model_cfg = t.model_config(vocab.size());
    run.cfg.resolve(&model_cfg, &vocab);
    let report = train_toy_with(&model_cfg, &t.task_spec(corpus), &t.options(), run.cfg.seed("training")?)?;
    info!("trained {} steps, validation accuracy {:.4}", report.steps, report.validation_accuracy);
    let path = run.dir.join(WEIGHTS_FILE);
    report.weights.save(&path).map_err(at(&path))?;
    run.artifacts.push(WEIGHTS_FILE.into());
    vocab.save(&run.dir.join(VOCAB_FILE))?;
    run.artifacts.push(VOCAB_FILE.into());
    let mut table = String::from("metric\tvalue\n");
    let _ = writeln!(table, "steps\t{}", report.steps);
    let _ = writeln!(table, "final_train_loss\t{:.6}", report.final_train_loss);
    let _ = writeln!(table, "validation_loss\t{:.6}", report.validation_loss);
    let _ = writeln!(table, "validation_accuracy\t{:.6}", report.validation_accuracy);
    let _ = writeln!(table, "chance\t{:.6}", report.chance);
    run.write("train.tsv", table)?;
    Ok(())
}

fn cache_build(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let path = required(&run.cfg.cache.document, "cache.document")?.to_path_buf();
    let doc = vocab.encode(&read_text(&path)?)?;
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let window = run.cfg.cache.window.expect("resolved");
    let mut bank = model.generate_memories(&doc, retr.stride, window)?;
    if !retr.special_token_ids.is_empty() {
        bank = bank.prune_special_tokens(&retr.special_token_ids)?;
    }
    let out = run.dir.join(BANK_FILE);
    bank.save(&out).map_err(at(&out))?;
    run.artifacts.push(BANK_FILE.into());
    let mut table = String::from("doc_tokens\tstride\twindow\twindows\tbank_tokens\n");
    let windows = extra_windows(doc.len(), retr.stride, window) + 1;
    let _ = writeln!(table, "{}\t{}\t{window}\t{windows}\t{}", doc.len(), retr.stride, bank.n_tokens());
    run.write("cache.tsv", table)?;
    Ok(())
}

fn generate_cmd(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let prompt_text =
        run.cfg.generation.prompt.clone().ok_or_else(|| CliError::Config("generation.prompt is not set".into()))?;
    let prompt = vocab.encode(&prompt_text)?;
    let bank = match &run.cfg.generation.bank {
        Some(p) => Some(MemoryBank::load(p).map_err(at(p))?),
        None => None,
    };
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let gen = run.cfg.generation_config(&vocab)?;
    let out = match gen.entropy_threshold {
        Some(_) => regenerate_uncertain(&model, &prompt, bank.as_ref(), &retr, &gen)?,
        None => generate(&model, &prompt, bank.as_ref(), &retr.with_k(gen.k_base), &gen)?,
    };
    let text = vocab.decode(&out.token_ids);
    println!("{text}");
    let mut record = serde_json::to_value(&out).expect("generation serializes");
    record["prompt"] = prompt_text.into();
    record["text"] = text.into();
    run.write("generation.jsonl", serde_json::to_string(&record).expect("json") + "\n")?;
    Ok(())
}

/// A lookup document of exactly `len` tokens.
fn kv_document(run: &Run, vocab: &Vocab, len: usize, min_distance: usize) -> Result<Vec<u32>> {
    let kv = vocab
        .kv_layout()
        .ok_or_else(|| CliError::Config("no input file given and the vocabulary cannot generate one".into()))?;
    let spec =
        KvDatasetSpec { vocab: kv, doc_lengths: vec![len], records_per_length: 1, min_distance, max_appearances: 1 };
    Ok(kv_dataset(&spec, &mut run.rng("generated document")?)?.remove(0).document)
}

fn corpus_or_generated(run: &Run, vocab: &Vocab, file: &Option<PathBuf>, len: usize, n: usize) -> Result<Vec<u32>> {
    match file {
        Some(p) => vocab.encode(&read_text(p)?),
        None if vocab.kv_layout().is_some() => kv_document(run, vocab, len, n.min(len / 2)),
        None => vocab.encode(&procedural_corpus(len, &mut run.rng("generated corpus")?)),
    }
}

fn bench_ppl(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let p = run.cfg.bench.ppl.clone();
    let corpus = corpus_or_generated(run, &vocab, &p.corpus, p.corpus_tokens, model.config().max_train_len)?;
    let lengths = p.lengths.expect("resolved");
    let mut reports = Vec::new();
    let mut table = String::new();
    for &method in &p.methods {
        let r = perplexity_eval(&model, &corpus, method, &lengths, p.eval_stride.expect("resolved"), &retr)?;
        let t = r.table();
        table += if table.is_empty() { &t } else { t.split_once('\n').map_or("", |x| x.1) };
        reports.push(r);
    }
    run.write("ppl.tsv", table)?;
    run.plot("ppl.svg", |path| plots::perplexity(path, &reports))
}

fn records(run: &Run, vocab: &Vocab, n: usize) -> Result<(Vec<EvalRecord>, usize)> {
    let b = &run.cfg.bench.retrieval;
    if let Some(p) = &b.dataset {
        let words = vocab.words().ok_or_else(|| CliError::Config("datasets need a word vocabulary".into()))?;
        let file = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
        let loaded = read_jsonl(BufReader::new(file), words).map_err(at(p))?;
        return Ok((loaded.records, loaded.skipped));
    }
    let kv = vocab.kv_layout().ok_or_else(|| {
        CliError::Config("bench.retrieval.dataset is not set and the vocabulary is not a lookup one".into())
    })?;
    let spec = KvDatasetSpec {
        vocab: kv,
        doc_lengths: b.doc_lengths.clone().expect("resolved"),
        records_per_length: b.records_per_length,
        min_distance: b.min_distance.unwrap_or(n),
        max_appearances: b.max_appearances,
    };
    Ok((kv_dataset(&spec, &mut run.rng("generated dataset")?)?, 0))
}

fn heatmap_rows(report: &RetrievalReport, out: &mut String) {
    for (len, row) in &report.heatmap {
        for (app, t) in row {
            let _ = writeln!(out, "{}\t{len}\t{app}\t{}\t{}\t{:.4}", report.method, t.correct, t.total, t.accuracy());
        }
    }
}

fn bench_retrieval(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let (records, skipped) = records(run, &vocab, model.config().max_train_len)?;
    let buckets = AppearanceBuckets(run.cfg.bench.retrieval.appearance_buckets.clone());
    let mut table = String::new();
    let mut heat = String::from("method\tdoc_length\tappearances\tcorrect\ttotal\taccuracy\n");
    for method in run.cfg.bench.retrieval.methods.clone() {
        let mut report = retrieval_bench(&model, &records, method, &retr, &buckets)?;
        report.skipped += skipped;
        let t = report.table();
        table += if table.is_empty() { &t } else { t.split_once('\n').map_or("", |x| x.1) };
        heatmap_rows(&report, &mut heat);
        let title = format!("{method} accuracy");
        run.plot(&format!("heatmap_{method}.svg"), |p| plots::heatmap(p, &title, &report.heatmap))?;
    }
    let _ = writeln!(table, "skipped\t{skipped}");
    run.write("retrieval.tsv", table)?;
    run.write("heatmap.tsv", heat)?;
    Ok(())
}

fn ablate_layers(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let (records, _) = records(run, &vocab, model.config().max_train_len)?;
    let mut table = String::from("subset\tlayers\tcorrect\ttotal\taccuracy\n");
    for row in layer_ablation(&model, &records, &retr)? {
        let layers: Vec<String> = row.layers.iter().map(usize::to_string).collect();
        let a = &row.accuracy;
        let _ = writeln!(table, "{}\t{}\t{}\t{}\t{:.4}", row.name, layers.join(","), a.correct, a.total, a.accuracy());
    }
    run.write("ablation.tsv", table)?;
    Ok(())
}

fn bench_timing(run: &mut Run) -> Result<()> {
    let (model, vocab) = load_model(run)?;
    let retr = run.cfg.retrieval_config(model.config(), &vocab)?;
    let t = run.cfg.bench.timing.clone();
    let window = t.window.expect("resolved");
    let doc = corpus_or_generated(run, &vocab, &t.document, t.doc_tokens.expect("resolved"), window)?;
    let queries: Vec<Vec<u32>> = match vocab.kv_layout() {
        Some(kv) => (0..t.n_queries).map(|i| vec![QUERY, kv.key(i % kv.n_keys)]).collect(),
        None => {
            let step = (doc.len() / t.n_queries.max(1)).max(1);
            (0..t.n_queries).map(|i| doc[(i * step) % doc.len()..].iter().take(8).copied().collect()).collect()
        }
    };
    let opts = TimingOptions { window, strides: t.strides.clone().expect("resolved"), repetitions: t.repetitions };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| CliError::Config(e.to_string()))?;
    let report = pool.install(|| timing_bench(&model, &doc, &queries, &retr, &opts))?;
    run.write("timing.tsv", report.table())?;
    run.write("timing.json", serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    run.plot("timing.svg", |p| plots::timing(p, &report))
}
