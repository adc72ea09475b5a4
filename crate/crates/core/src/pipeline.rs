//! File-based pipeline stages behind the command-line tool: corpus
//! generation, tracing, vocabulary building, pretraining, finetuning,
//! embedding, search, evaluation and masked-prediction probing.
//!
//! Every stage is deterministic under its seed. Function ids of variants
//! are `<source>_v<k>`, which is how stages recover source groups.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_pairs, gen_function, CorpusManifest, Pair, PairConfig, PairError, PassKind, SourceEntry, Split, VariantEntry,
    DEFAULT_SIZE,
};
use crate::encoding::{
    apply_mask, build_vocab, split_subsequences, tokenize_trace, EncodeError, EncodedInput, MaskedInput, Vocab,
    VocabError, DEFAULT_MASK_PERCENT, WINDOW_CHOICES,
};
use crate::ir::{parse_irfn, render, render_irfn, IrFunction, ParseError};
use crate::microtrace::{read_traces, splitmix64, trace_batch, write_traces, MicroTrace, TraceFormatError, TracerConfig};
use crate::neural::{
    load_checkpoint, load_checkpoint_for, perplexity, predict_masked, pretrain, save_checkpoint, AdamConfig,
    CheckpointError, ConfigError, Model, ModelConfig, Perplexity, TrainConfig, TrainError,
};
use crate::similarity::{
    byte_kl_divergence, embed_inputs, finetune, function_embedding, read_embeddings, roc_ascii, roc_auc, roc_curve,
    roc_svg, static_inputs, topk_errors, write_embeddings, EmbeddingIndex, EvalReport, FinetuneConfig,
    FunctionEmbedding, PairRef, SimilarityError, DEFAULT_MARGIN, KL_EPSILON,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FUNCTIONS_DIR: &str = "functions";
pub const TRACES_PER_FN: usize = 3;
pub const TOPK: [usize; 4] = [1, 3, 5, 10];
/// Functions per forward pass when embedding; fixed so results do not
/// depend on the worker count.
const EMBED_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Traces { path: PathBuf, source: TraceFormatError },
    #[error("{path}: {source}")]
    Vocab { path: PathBuf, source: VocabError },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(contents.as_ref()).map_err(io_at(path))?;
    w.flush().map_err(io_at(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Stable seed for a named sub-task.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a, then mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

/// Source id a function belongs to.
pub fn source_group(fn_id: &str) -> &str {
    match fn_id.rfind("_v") {
        Some(i) if fn_id[i + 2..].bytes().all(|b| b.is_ascii_digit()) && i + 2 < fn_id.len() => &fn_id[..i],
        _ => fn_id,
    }
}

/// Runs `f` over `items` on up to `jobs` threads; output order matches input.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub sources: usize,
    pub seed: u64,
    pub size: RangeInclusive<usize>,
    pub ratio: usize,
    pub train_fraction: f64,
    pub variants_per_source: usize,
    pub max_pipeline: usize,
    pub passes: Vec<PassKind>,
}

impl Default for GenOptions {
    fn default() -> Self {
        let p = PairConfig::default();
        GenOptions {
            sources: 100,
            seed: 0,
            size: DEFAULT_SIZE,
            ratio: p.ratio,
            train_fraction: p.train_fraction,
            variants_per_source: p.variants_per_source,
            max_pipeline: p.max_pipeline,
            passes: p.passes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GenSummary {
    pub sources: usize,
    pub variants: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

/// Writes `functions/<id>.irfn` for every source and variant plus
/// `manifest.json` describing splits and labelled pairs.
pub fn cmd_gen(opts: &GenOptions, dir: &Path) -> Result<GenSummary> {
    let seeds: Vec<u64> = (0..opts.sources as u64)
        .map(|i| derive_seed(opts.seed, &format!("source{i}")))
        .collect();
    let sources: Vec<IrFunction> = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| gen_function(s, opts.size.clone()).with_id(format!("src{i:04}")))
        .collect();
    let cfg = PairConfig {
        passes: opts.passes.clone(),
        ratio: opts.ratio,
        train_fraction: opts.train_fraction,
        variants_per_source: opts.variants_per_source,
        max_pipeline: opts.max_pipeline,
        seed: derive_seed(opts.seed, "pairs"),
    };
    let d = build_pairs(&sources, &cfg)?;

    let fdir = dir.join(FUNCTIONS_DIR);
    if fdir.exists() {
        for entry in fs::read_dir(&fdir).map_err(io_at(&fdir))? {
            let p = entry.map_err(io_at(&fdir))?.path();
            if p.extension().is_some_and(|e| e == "irfn") {
                fs::remove_file(&p).map_err(io_at(&p))?;
            }
        }
    }
    let file_of = |id: &str| format!("{FUNCTIONS_DIR}/{id}.irfn");
    let mut manifest = CorpusManifest {
        sources: Vec::new(),
        variants: Vec::new(),
        pairs: d.pairs.clone(),
    };
    for (i, f) in d.sources.iter().enumerate() {
        write_file(&dir.join(file_of(&f.id)), render_irfn(f))?;
        manifest.sources.push(SourceEntry {
            id: f.id.clone(),
            seed: seeds[i],
            fn_file: file_of(&f.id),
            split: d.source_split[i],
        });
    }
    for v in &d.variants {
        write_file(&dir.join(file_of(&v.id)), render_irfn(&v.function))?;
        manifest.variants.push(VariantEntry {
            id: v.id.clone(),
            source: d.sources[v.source].id.clone(),
            fn_file: file_of(&v.id),
            pipeline: v.pipeline.iter().map(|p| p.to_string()).collect(),
        });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(GenSummary {
        sources: d.sources.len(),
        variants: d.variants.len(),
        train_pairs: d.pairs_in(Split::Train).count(),
        test_pairs: d.pairs_in(Split::Test).count(),
    })
}

/// A corpus directory read back from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    /// Sources first, then variants, in manifest order.
    pub functions: Vec<IrFunction>,
    pub split: HashMap<String, Split>,
}

impl Corpus {
    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.functions.iter().enumerate().map(|(i, f)| (f.id.as_str(), i)).collect()
    }

    pub fn split_functions(&self, split: Split) -> Vec<&IrFunction> {
        self.functions.iter().filter(|f| self.split[&f.id] == split).collect()
    }
}

fn corpus_files(manifest: &CorpusManifest) -> Vec<(String, String)> {
    manifest
        .sources
        .iter()
        .map(|s| (s.id.clone(), s.fn_file.clone()))
        .chain(manifest.variants.iter().map(|v| (v.id.clone(), v.fn_file.clone())))
        .collect()
}

fn read_irfn(path: &Path) -> Result<IrFunction> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    parse_irfn(&text).map_err(|source| PipelineError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let functions = corpus_files(&manifest)
        .iter()
        .map(|(_, file)| read_irfn(&dir.join(file)))
        .collect::<Result<Vec<_>>>()?;
    let mut split: HashMap<String, Split> = manifest.sources.iter().map(|s| (s.id.clone(), s.split)).collect();
    for v in &manifest.variants {
        let s = *split
            .get(&v.source)
            .ok_or_else(|| PipelineError::Invalid(format!("variant {} names unknown source {}", v.id, v.source)))?;
        split.insert(v.id.clone(), s);
    }
    Ok(Corpus {
        manifest,
        functions,
        split,
    })
}

#[derive(Clone, Debug)]
pub struct TraceOptions {
    pub seed: u64,
    pub traces_per_fn: usize,
    pub tracer: TracerConfig,
    pub jobs: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            seed: 0,
            traces_per_fn: TRACES_PER_FN,
            tracer: TracerConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TraceSummary {
    pub functions: usize,
    pub records: usize,
    /// Files that could not be read or parsed, with the reason.
    pub failures: Vec<String>,
}

/// Concrete trace seeds for one function.
pub fn trace_seeds(seed: u64, fn_id: &str, n: usize) -> Vec<u64> {
    let base = derive_seed(seed, fn_id);
    (0..n as u64).map(|k| splitmix64(base.wrapping_add(k))).collect()
}

/// Micro-executes every corpus function `traces_per_fn` times and appends
/// its dummy trace. Unreadable functions are reported and skipped.
pub fn cmd_trace(corpus_dir: &Path, out: &Path, opts: &TraceOptions) -> Result<TraceSummary> {
    let manifest = read_manifest(corpus_dir)?;
    let files = corpus_files(&manifest);
    let results = par_map(&files, opts.jobs, |(id, file)| -> Result<Vec<MicroTrace>> {
        let f = read_irfn(&corpus_dir.join(file))?;
        Ok(trace_batch(&f, &trace_seeds(opts.seed, id, opts.traces_per_fn), &opts.tracer))
    });
    let mut summary = TraceSummary::default();
    let mut w = create(out)?;
    for r in results {
        match r {
            Ok(traces) => {
                write_traces(&mut w, &traces).map_err(io_at(out))?;
                summary.functions += 1;
                summary.records += traces.len();
            }
            Err(e) => summary.failures.push(e.to_string()),
        }
    }
    w.flush().map_err(io_at(out))?;
    Ok(summary)
}

pub fn load_traces(path: &Path) -> Result<Vec<MicroTrace>> {
    let file = File::open(path).map_err(io_at(path))?;
    read_traces(BufReader::new(file)).map_err(|source| PipelineError::Traces {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).map_err(io_at(path))?;
    Vocab::read(BufReader::new(file)).map_err(|source| PipelineError::Vocab {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_vocab(traces: &Path, out: &Path) -> Result<Vocab> {
    let vocab = build_vocab(&load_traces(traces)?);
    let mut w = create(out)?;
    vocab.write(&mut w).map_err(io_at(out))?;
    w.flush().map_err(io_at(out))?;
    Ok(vocab)
}

pub fn load_model(dir: &Path, vocab: &Vocab) -> Result<Model> {
    load_checkpoint_for(dir, &vocab.digest()).map_err(|source| PipelineError::Checkpoint {
        path: dir.to_path_buf(),
        source,
    })
}

fn save_model(dir: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    save_checkpoint(dir, model, &vocab.digest()).map_err(io_at(dir))
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub accum: usize,
    pub mask_percent: f64,
    pub seed: u64,
    /// Fraction of source groups kept out of training for perplexity.
    pub heldout_fraction: f64,
    /// Train on dummy traces only, dropping concrete values.
    pub static_only: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        PretrainOptions {
            model: ModelConfig::desk(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            accum: t.accum,
            mask_percent: DEFAULT_MASK_PERCENT,
            seed: 0,
            heldout_fraction: 0.1,
            static_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub loss: Option<f64>,
    pub code_ppl: f64,
    pub byte_ppl: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub sequences: usize,
    pub heldout_sequences: usize,
    pub log: Vec<PplRecord>,
}

/// Whether a function's source group is held out of pretraining.
pub fn is_heldout(seed: u64, fn_id: &str, fraction: f64) -> bool {
    let h = derive_seed(seed, &format!("heldout:{}", source_group(fn_id)));
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

pub fn encode_traces<'a>(
    traces: impl IntoIterator<Item = &'a MicroTrace>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedInput>> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(split_subsequences(&tokenize_trace(t, vocab)?, max_len)?);
    }
    Ok(out)
}

/// Masked copies of `data` under a fixed seed, for comparable perplexities.
pub fn fixed_masks(data: &[EncodedInput], percent: f64, seed: u64) -> Vec<MaskedInput> {
    data.iter()
        .enumerate()
        .map(|(i, e)| apply_mask(e, percent, &WINDOW_CHOICES, splitmix64(seed ^ i as u64)))
        .collect()
}

/// Masked-LM pretraining with a checkpoint after every epoch
/// (`epoch_NN/`, final model in `model/`) and a held-out perplexity log
/// (`ppl.jsonl`).
pub fn cmd_pretrain(traces: &Path, vocab: &Path, out: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    opts.model.validate()?;
    let vocab = load_vocab(vocab)?;
    let traces = load_traces(traces)?;
    let (held, train): (Vec<&MicroTrace>, Vec<&MicroTrace>) = traces
        .iter()
        .filter(|t| !opts.static_only || t.is_dummy())
        .partition(|t| is_heldout(opts.seed, &t.fn_id, opts.heldout_fraction));
    let train = encode_traces(train, &vocab, opts.model.max_len)?;
    let held = encode_traces(held, &vocab, opts.model.max_len)?;
    let held = fixed_masks(&held, opts.mask_percent, derive_seed(opts.seed, "heldout-mask"));

    let mut model = Model::new(opts.model.clone(), vocab.len(), derive_seed(opts.seed, "init"));
    let cfg = TrainConfig {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        lr: opts.lr,
        accum: opts.accum,
        mask_percent: opts.mask_percent,
        seed: derive_seed(opts.seed, "pretrain"),
        adam: AdamConfig::default(),
    };
    let ppl = |m: &Model| -> Perplexity { perplexity(m, &held) };
    let record = |epoch, loss, p: Perplexity| PplRecord {
        epoch,
        loss,
        code_ppl: p.code,
        byte_ppl: p.byte,
    };
    let mut log = vec![record(0, None, ppl(&model))];
    let mut saved: Result<()> = Ok(());
    pretrain(&mut model, &train, &cfg, |s, m| {
        log.push(record(s.epoch + 1, Some(s.mean_loss), ppl(m)));
        if saved.is_ok() {
            saved = save_model(&out.join(format!("epoch_{:02}", s.epoch + 1)), m, &vocab);
        }
    })?;
    saved?;
    save_model(&out.join("model"), &model, &vocab)?;
    let mut text = String::new();
    for r in &log {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&out.join("ppl.jsonl"), text)?;
    Ok(PretrainSummary {
        sequences: train.len(),
        heldout_sequences: held.len(),
        log,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    /// Architecture for a model trained from scratch.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub accum: usize,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneOptions {
            model: ModelConfig::desk(),
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            margin: DEFAULT_MARGIN,
            accum: f.accum,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Static-code inputs for every corpus function, in corpus order.
pub fn corpus_inputs(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<EncodedInput>>> {
    corpus
        .functions
        .iter()
        .map(|f| static_inputs(f, vocab, max_len).map_err(PipelineError::from))
        .collect()
}

/// Trains on the train-split pairs, starting from `init` or from scratch,
/// and writes the result to `out/model` with a loss log.
pub fn cmd_finetune(
    corpus_dir: &Path,
    vocab: &Path,
    init: Option<&Path>,
    out: &Path,
    opts: &FinetuneOptions,
) -> Result<Vec<FinetuneRecord>> {
    let corpus = load_corpus(corpus_dir)?;
    let vocab = load_vocab(vocab)?;
    let mut model = match init {
        Some(dir) => load_model(dir, &vocab)?,
        None => {
            opts.model.validate()?;
            Model::new(opts.model.clone(), vocab.len(), derive_seed(opts.seed, "init"))
        }
    };
    let inputs = corpus_inputs(&corpus, &vocab, model.config.max_len)?;
    let index = corpus.index_of();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| PipelineError::Invalid(format!("pair names unknown function {id}")))
    };
    let pairs = corpus
        .manifest
        .pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| {
            Ok(PairRef {
                a: lookup(&p.a)?,
                b: lookup(&p.b)?,
                y: p.y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = FinetuneConfig {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        lr: opts.lr,
        margin: opts.margin,
        accum: opts.accum,
        seed: derive_seed(opts.seed, "finetune"),
        adam: AdamConfig::default(),
    };
    let history = finetune(&mut model, &inputs, &pairs, &cfg, |_, _| {})?;
    save_model(&out.join("model"), &model, &vocab)?;
    let log: Vec<FinetuneRecord> = history
        .iter()
        .map(|s| FinetuneRecord {
            epoch: s.epoch + 1,
            loss: s.mean_loss,
        })
        .collect();
    let mut text = String::new();
    for r in &log {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&out.join("finetune.jsonl"), text)?;
    Ok(log)
}

/// Embeds functions in fixed-size batches spread over `jobs` workers.
pub fn embed_parallel(model: &Model, fns: &[&IrFunction], vocab: &Vocab, jobs: usize) -> Result<Vec<FunctionEmbedding>> {
    let inputs = fns
        .iter()
        .map(|f| static_inputs(f, vocab, model.config.max_len))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let batches: Vec<&[Vec<EncodedInput>]> = inputs.chunks(EMBED_BATCH).collect();
    let vectors = par_map(&batches, jobs, |b| embed_inputs(model, b, EMBED_BATCH));
    Ok(fns
        .iter()
        .zip(vectors.into_iter().flatten())
        .map(|(f, vector)| FunctionEmbedding {
            fn_id: f.id.clone(),
            dialect: f.dialect,
            vector,
        })
        .collect())
}

/// Writes the embedding store for every corpus function.
pub fn cmd_embed(corpus_dir: &Path, vocab: &Path, checkpoint: &Path, out: &Path, jobs: usize) -> Result<usize> {
    let corpus = load_corpus(corpus_dir)?;
    let vocab = load_vocab(vocab)?;
    let model = load_model(checkpoint, &vocab)?;
    let fns: Vec<&IrFunction> = corpus.functions.iter().collect();
    let embs = embed_parallel(&model, &fns, &vocab, jobs)?;
    let mut w = create(out)?;
    write_embeddings(&mut w, &embs).map_err(io_at(out))?;
    w.flush().map_err(io_at(out))?;
    Ok(embs.len())
}

pub fn load_store(path: &Path) -> Result<Vec<FunctionEmbedding>> {
    let file = File::open(path).map_err(io_at(path))?;
    read_embeddings(BufReader::new(file)).map_err(io_at(path))
}

/// Ranks the stored embeddings against the function in `query`.
pub fn cmd_search(store: &Path, vocab: &Path, checkpoint: &Path, query: &Path, k: usize) -> Result<Vec<(String, f64)>> {
    let vocab = load_vocab(vocab)?;
    let model = load_model(checkpoint, &vocab)?;
    let q = function_embedding(&model, &vocab, &read_irfn(query)?)?;
    let index = EmbeddingIndex::new(load_store(store)?)?;
    Ok(index.search(&q.vector, k)?)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Trace file for the perplexity entries; without it `ppl` is empty.
    pub traces: Option<PathBuf>,
    pub mask_percent: Option<f64>,
    /// Score a seeded subsample of this many test pairs, keeping the
    /// similar/dissimilar ratio.
    pub test_pairs: Option<usize>,
    pub seed: u64,
    pub jobs: usize,
}

/// Scores the test split: pair AUC, variant-to-source retrieval, masked-LM
/// perplexity on test-split traces and the byte KL divergence between the
/// rendered train and test functions. Writes `report.json`, `roc.svg` and
/// `roc.txt` into `out`.
pub fn cmd_eval(corpus_dir: &Path, vocab: &Path, checkpoint: &Path, out: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let corpus = load_corpus(corpus_dir)?;
    let vocab = load_vocab(vocab)?;
    let model = load_model(checkpoint, &vocab)?;
    let (report, scores) = evaluate_scored(&corpus, &vocab, &model, opts)?;
    write_json(&out.join("report.json"), &report)?;
    let curve = roc_curve(&scores);
    write_file(&out.join("roc.svg"), roc_svg(&curve, report.auc))?;
    write_file(&out.join("roc.txt"), roc_ascii(&curve, 20))?;
    Ok(report)
}

fn embed_split(corpus: &Corpus, vocab: &Vocab, model: &Model, jobs: usize) -> Result<HashMap<String, FunctionEmbedding>> {
    let fns = corpus.split_functions(Split::Test);
    Ok(embed_parallel(model, &fns, vocab, jobs)?
        .into_iter()
        .map(|e| (e.fn_id.clone(), e))
        .collect())
}

/// Test pairs in manifest order, optionally a stratified seeded subsample.
pub fn test_pairs(corpus: &Corpus, limit: Option<usize>, seed: u64) -> Vec<&Pair> {
    let all: Vec<&Pair> = corpus.manifest.pairs.iter().filter(|p| p.split == Split::Test).collect();
    let n = match limit {
        Some(n) if n < all.len() => n,
        _ => return all,
    };
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|&i| all[i].y > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval-pairs"));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let k = ((n * pos.len()) as f64 / all.len() as f64).round() as usize;
    let mut keep: Vec<usize> = pos[..k].iter().chain(&neg[..n - k]).copied().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| all[i]).collect()
}

/// (cosine, similar) for each pair.
pub fn pair_scores(pairs: &[&Pair], embs: &HashMap<String, FunctionEmbedding>) -> Result<Vec<(f64, bool)>> {
    pairs
        .iter()
        .map(|p| {
            let get = |id: &str| {
                embs.get(id)
                    .ok_or_else(|| PipelineError::Invalid(format!("no embedding for {id}")))
            };
            let c = crate::similarity::cosine_similarity(&get(&p.a)?.vector, &get(&p.b)?.vector)?;
            Ok((c, p.y > 0))
        })
        .collect()
}

/// Metrics for `model` on the corpus test split.
pub fn evaluate(corpus: &Corpus, vocab: &Vocab, model: &Model, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_scored(corpus, vocab, model, opts).map(|r| r.0)
}

fn evaluate_scored(
    corpus: &Corpus,
    vocab: &Vocab,
    model: &Model,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<(f64, bool)>)> {
    let embs = embed_split(corpus, vocab, model, opts.jobs)?;
    let scores = pair_scores(&test_pairs(corpus, opts.test_pairs, opts.seed), &embs)?;
    let auc = roc_auc(&scores)?;

    let test_sources: Vec<FunctionEmbedding> = corpus
        .manifest
        .sources
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| embs[&s.id].clone())
        .collect();
    let queries: Vec<FunctionEmbedding> = corpus
        .manifest
        .variants
        .iter()
        .filter(|v| corpus.split[&v.id] == Split::Test)
        .map(|v| embs[&v.id].clone())
        .collect();
    let truth: HashMap<String, String> = corpus
        .manifest
        .variants
        .iter()
        .map(|v| (v.id.clone(), v.source.clone()))
        .collect();
    let index = EmbeddingIndex::new(test_sources)?;
    let errors = topk_errors(&queries, &index, &truth, &TOPK)?;
    let topk_error: BTreeMap<usize, f64> = TOPK.iter().copied().zip(errors.iter().copied()).collect();

    let mut ppl = BTreeMap::new();
    if let Some(path) = &opts.traces {
        let traces = load_traces(path)?;
        let test: Vec<&MicroTrace> = traces
            .iter()
            .filter(|t| corpus.split.get(&t.fn_id) == Some(&Split::Test))
            .collect();
        let data = encode_traces(test, vocab, model.config.max_len)?;
        let masked = fixed_masks(
            &data,
            opts.mask_percent.unwrap_or(DEFAULT_MASK_PERCENT),
            derive_seed(opts.seed, "eval-mask"),
        );
        let p = perplexity(model, &masked);
        ppl.insert("code".to_string(), p.code);
        ppl.insert("byte".to_string(), p.byte);
    }

    let bytes = |split: Split| -> Vec<u8> {
        corpus
            .split_functions(split)
            .iter()
            .flat_map(|f| render(f).into_bytes())
            .collect()
    };
    let kl = byte_kl_divergence(&bytes(Split::Train), &bytes(Split::Test), KL_EPSILON);
    let report = EvalReport {
        auc,
        p_at_1: 1.0 - errors[0],
        topk_error,
        ppl,
        kl,
    };
    Ok((report, scores))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub position: usize,
    /// The token that was hidden.
    pub actual: String,
    /// Five most likely code tokens, most likely first.
    pub top: Vec<(String, f64)>,
    /// Most likely value bytes, big-endian; `None` where the hidden value
    /// was a dummy.
    pub value: Option<[u8; 8]>,
    pub value_confidence: Vec<f64>,
}

/// Masks token `position` of the function's first concrete trace and
/// reports what the model predicts there.
pub fn cmd_probe(checkpoint: &Path, vocab: &Path, function: &Path, position: usize, seed: u64) -> Result<ProbeResult> {
    let vocab = load_vocab(vocab)?;
    let model = load_model(checkpoint, &vocab)?;
    let f = read_irfn(function)?;
    let trace = &trace_batch(&f, &trace_seeds(seed, &f.id, 1), &TracerConfig::default())[0];
    let chunks = split_subsequences(&tokenize_trace(trace, &vocab)?, model.config.max_len)?;
    let total: usize = chunks.iter().map(|c| c.len()).sum();
    let mut offset = position;
    let chunk = chunks
        .iter()
        .find(|c| {
            if offset < c.len() {
                true
            } else {
                offset -= c.len();
                false
            }
        })
        .ok_or_else(|| PipelineError::Invalid(format!("position {position} out of range (trace has {total} tokens)")))?;
    let masked = MaskedInput::at(chunk, &[offset]);
    let pred = predict_masked(&model, &masked).remove(0);
    let mut ranked: Vec<(usize, f64)> = pred.code.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = ranked
        .iter()
        .take(5)
        .map(|&(i, p)| (vocab.token(i as u32).to_string(), p))
        .collect();
    let concrete = chunk.values[offset] != crate::encoding::DUMMY_VALUE;
    let mut value = [0u8; 8];
    let mut value_confidence = Vec::with_capacity(8);
    for (j, dist) in pred.bytes.iter().enumerate() {
        let (b, p) = dist
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        value[j] = b as u8;
        value_confidence.push(p);
    }
    Ok(ProbeResult {
        position,
        actual: vocab.token(chunk.tokens[offset]).to_string(),
        top,
        value: concrete.then_some(value),
        value_confidence,
    })
}

/// Reads a checkpoint without checking it against a vocabulary.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    load_checkpoint(dir)
        .map(|c| c.model.config)
        .map_err(|source| PipelineError::Checkpoint {
            path: dir.to_path_buf(),
            source,
        })
}
