mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use semtrace::corpus::PassKind;
use semtrace::microtrace::TracerConfig;
use semtrace::neural::ModelConfig;
use semtrace::pipeline::{
    cmd_embed, cmd_eval, cmd_finetune, cmd_gen, cmd_pretrain, cmd_probe, cmd_search, cmd_trace, cmd_vocab,
    EvalOptions, FinetuneOptions, GenOptions, PretrainOptions, TraceOptions,
};

use config::Settings;

/// Micro-trace pretraining and function similarity over a toy IR.
#[derive(Parser)]
#[command(name = "semtrace", version)]
struct Cli {
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; falls back to the config file, then SEMTRACE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tracing and embedding.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source functions, transformed variants and labelled pairs.
    Gen(GenArgs),
    /// Micro-execute every corpus function.
    Trace(TraceArgs),
    /// Build the token vocabulary from traces.
    Vocab(VocabArgs),
    /// Masked-LM pretraining on traces.
    Pretrain(PretrainArgs),
    /// Train on similar/dissimilar pairs.
    Finetune(FinetuneArgs),
    /// Write embeddings of every corpus function.
    Embed(EmbedArgs),
    /// Rank stored embeddings against a query function.
    Search(SearchArgs),
    /// Score the test split and write a report.
    Eval(EvalArgs),
    /// Show masked-token predictions at one trace position.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Corpus directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long)]
    max_size: Option<usize>,
    /// Dissimilar pairs per similar pair.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Variants per source function.
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    max_pipeline: Option<usize>,
    /// Comma-separated transform passes.
    #[arg(long)]
    passes: Option<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trace file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    traces_per_fn: Option<usize>,
    #[arg(long)]
    step_budget: Option<usize>,
    #[arg(long)]
    stack_size: Option<u64>,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Vocabulary file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model preset: desk, full or tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Batches per optimizer step.
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    mask_percent: Option<f64>,
    #[arg(long)]
    heldout_fraction: Option<f64>,
    /// Use only dummy-valued traces.
    #[arg(long)]
    static_only: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained checkpoint to start from.
    #[arg(long, conflicts_with = "scratch")]
    init: Option<PathBuf>,
    /// Start from random weights instead of a checkpoint.
    #[arg(long)]
    scratch: bool,
    /// Directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model preset when training from scratch.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    accum: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Embedding store to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Query function (.irfn).
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Traces for the perplexity entries.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Report directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score a stratified subsample of this many test pairs.
    #[arg(long)]
    test_pairs: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Function to trace (.irfn).
    #[arg(long)]
    function: PathBuf,
    /// Token position in the function's first trace.
    #[arg(long)]
    position: usize,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn preset(name: &str) -> Result<ModelConfig> {
    Ok(ModelConfig::preset(name)?)
}

fn passes(list: &str) -> Result<Vec<PassKind>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| PassKind::from_name(s).ok_or_else(|| anyhow!("unknown pass {s:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let seed = s.seed(cli.seed)?;
    let jobs = s.pick(cli.jobs, "jobs", 1usize)?.max(1);
    match cli.command {
        Command::Gen(a) => {
            let d = GenOptions::default();
            let out = s.path(a.out, "corpus", "corpus")?;
            let pass_list = match a.passes {
                Some(p) => Some(p),
                None => s.file("passes")?,
            };
            let opts = GenOptions {
                sources: s.pick(a.sources, "sources", d.sources)?,
                seed,
                size: s.pick(a.min_size, "min_size", *d.size.start())?..=s.pick(a.max_size, "max_size", *d.size.end())?,
                ratio: s.pick(a.ratio, "ratio", d.ratio)?,
                train_fraction: s.pick(a.train_fraction, "train_fraction", d.train_fraction)?,
                variants_per_source: s.pick(a.variants, "variants", d.variants_per_source)?,
                max_pipeline: s.pick(a.max_pipeline, "max_pipeline", d.max_pipeline)?,
                passes: match pass_list {
                    Some(p) => passes(&p)?,
                    None => d.passes,
                },
            };
            if opts.size.is_empty() || *opts.size.start() == 0 {
                bail!("function size range {:?} is empty", opts.size);
            }
            let g = cmd_gen(&opts, &out)?;
            println!(
                "wrote {}: {} sources, {} variants, {} train pairs, {} test pairs",
                out.display(),
                g.sources,
                g.variants,
                g.train_pairs,
                g.test_pairs
            );
            Ok(true)
        }
        Command::Trace(a) => {
            let corpus = s.path(a.corpus, "corpus", "corpus")?;
            let out = s.path(a.out, "traces", "traces.jsonl")?;
            let d = TracerConfig::default();
            let opts = TraceOptions {
                seed,
                traces_per_fn: s.pick(a.traces_per_fn, "traces_per_fn", TraceOptions::default().traces_per_fn)?,
                tracer: TracerConfig {
                    step_budget: s.pick(a.step_budget, "step_budget", d.step_budget)?,
                    stack_size: s.pick(a.stack_size, "stack_size", d.stack_size)?,
                },
                jobs,
            };
            let t = cmd_trace(&corpus, &out, &opts)?;
            for f in &t.failures {
                eprintln!("error: {f}");
            }
            println!(
                "wrote {}: {} records for {} functions, {} failed",
                out.display(),
                t.records,
                t.functions,
                t.failures.len()
            );
            Ok(t.failures.is_empty())
        }
        Command::Vocab(a) => {
            let traces = s.path(a.traces, "traces", "traces.jsonl")?;
            let out = s.path(a.out, "vocab", "vocab.txt")?;
            let v = cmd_vocab(&traces, &out)?;
            println!("wrote {}: {} tokens, sha256 {}", out.display(), v.len(), v.digest());
            Ok(true)
        }
        Command::Pretrain(a) => {
            let d = PretrainOptions::default();
            let opts = PretrainOptions {
                model: preset(&s.pick(a.preset, "preset", "desk".to_string())?)?,
                epochs: s.pick(a.epochs, "pretrain_epochs", d.epochs)?,
                batch_size: s.pick(a.batch_size, "batch_size", d.batch_size)?,
                lr: s.pick(a.lr, "pretrain_lr", d.lr)?,
                accum: s.pick(a.accum, "accum", d.accum)?,
                mask_percent: s.pick(a.mask_percent, "mask_percent", d.mask_percent)?,
                seed,
                heldout_fraction: s.pick(a.heldout_fraction, "heldout_fraction", d.heldout_fraction)?,
                static_only: a.static_only || s.file("static_only")?.unwrap_or(false),
            };
            let traces = s.path(a.traces, "traces", "traces.jsonl")?;
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let out = s.path(a.out, "pretrain_dir", "pretrain")?;
            let p = cmd_pretrain(&traces, &vocab, &out, &opts)?;
            println!("{} training sequences, {} held out", p.sequences, p.heldout_sequences);
            for r in &p.log {
                let loss = r.loss.map_or("-".to_string(), |l| format!("{l:.4}"));
                println!(
                    "epoch {:>3}  loss {loss:>8}  code ppl {:.3}  byte ppl {:.3}",
                    r.epoch, r.code_ppl, r.byte_ppl
                );
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Finetune(a) => {
            let d = FinetuneOptions::default();
            let opts = FinetuneOptions {
                model: preset(&s.pick(a.preset, "preset", "desk".to_string())?)?,
                epochs: s.pick(a.epochs, "finetune_epochs", d.epochs)?,
                batch_size: s.pick(a.batch_size, "batch_size", d.batch_size)?,
                lr: s.pick(a.lr, "finetune_lr", d.lr)?,
                margin: s.pick(a.margin, "margin", d.margin)?,
                accum: s.pick(a.accum, "accum", d.accum)?,
                seed,
            };
            if !(0.0..=0.5).contains(&opts.margin) {
                bail!("margin {} outside [0, 0.5]", opts.margin);
            }
            let corpus = s.path(a.corpus, "corpus", "corpus")?;
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let init = if a.scratch {
                None
            } else {
                Some(s.path(a.init, "init", "pretrain/model")?)
            };
            let out = s.path(a.out, "finetune_dir", "finetune")?;
            let log = cmd_finetune(&corpus, &vocab, init.as_deref(), &out, &opts)?;
            for r in &log {
                println!("epoch {:>3}  loss {:.4}", r.epoch, r.loss);
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Embed(a) => {
            let corpus = s.path(a.corpus, "corpus", "corpus")?;
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let ckpt = s.path(a.checkpoint, "checkpoint", "finetune/model")?;
            let out = s.path(a.out, "store", "embeddings.jsonl")?;
            let n = cmd_embed(&corpus, &vocab, &ckpt, &out, jobs)?;
            println!("wrote {}: {n} embeddings", out.display());
            Ok(true)
        }
        Command::Search(a) => {
            let store = s.path(a.store, "store", "embeddings.jsonl")?;
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let ckpt = s.path(a.checkpoint, "checkpoint", "finetune/model")?;
            let k = s.pick(a.k, "k", 10usize)?;
            for (rank, (id, score)) in cmd_search(&store, &vocab, &ckpt, &a.query, k)?.iter().enumerate() {
                println!("{:>3}  {score:.6}  {id}", rank + 1);
            }
            Ok(true)
        }
        Command::Eval(a) => {
            let corpus = s.path(a.corpus, "corpus", "corpus")?;
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let ckpt = s.path(a.checkpoint, "checkpoint", "finetune/model")?;
            let out = s.path(a.out, "report_dir", "report")?;
            let traces = match a.traces {
                Some(t) => Some(t),
                None => s.file("traces")?,
            };
            let opts = EvalOptions {
                traces,
                mask_percent: s.file("mask_percent")?,
                test_pairs: match a.test_pairs {
                    Some(n) => Some(n),
                    None => s.file("test_pairs")?,
                },
                seed,
                jobs,
            };
            let r = cmd_eval(&corpus, &vocab, &ckpt, &out, &opts)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            println!("wrote {}", out.join("report.json").display());
            Ok(true)
        }
        Command::Probe(a) => {
            let vocab = s.path(a.vocab, "vocab", "vocab.txt")?;
            let ckpt = s.path(a.checkpoint, "checkpoint", "pretrain/model")?;
            let p = cmd_probe(&ckpt, &vocab, &a.function, a.position, seed)?;
            println!("position {}: actual {:?}", p.position, p.actual);
            for (tok, prob) in &p.top {
                println!("  {prob:>7.2}%  {tok}", prob = prob * 100.0);
            }
            if let Some(v) = p.value {
                let conf: Vec<String> = p.value_confidence.iter().map(|c| format!("{:.0}%", c * 100.0)).collect();
                println!("  value 0x{:016x}  (per byte {})", u64::from_be_bytes(v), conf.join(" "));
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
