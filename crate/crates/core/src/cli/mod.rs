//! The `tlmk` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad config,
//! data or arguments), 3 runtime error (I/O and failures while running).
//! Errors print one line to stderr: `tlmk: error[<kind>]: <message>`.
//!
//! `TLMK_THREADS` caps the worker threads used for per-example gradients
//! and evaluation; results do not depend on it.

mod config;
mod report;

pub use config::{RunConfig, RunPaths};
pub use report::{published_rows, table_report, PublishedRow, TableRow};

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analyzer::{analyze, compare_reports, divergences_to_text, empirical_profile};
use crate::error::{Error, Result};
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, trainable_mask, Arch, Model, ModelConfig,
};
use crate::planner::{candidates_to_text, enumerate_feasible, SearchSpace};
use crate::quant::{is_quantized_container, quantize_model, quantized_memory, QuantizedModel};
use crate::seed::{sub_seed, DATA_SPLIT, HEAD_INIT, MODEL_INIT};
use crate::textpipe::{label_set, load_tsv, split_dataset, train_bpe, BpeVocab, MaskingRule, OfficialSplits, Splits};
use crate::trainer::{
    encode_examples, evaluate, pretrain_mlm_nsp, train_classifier, train_peft_quantized, MetricTask, TaskData,
};

#[derive(Parser, Debug)]
#[command(name = "tlmk", version, about = "Tiny language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Memory and operation counts of a config, preset or checkpoint.
    Analyze {
        #[arg(long, group = "source")]
        config: Option<PathBuf>,
        /// One of the named presets, e.g. EmbBERT-Q.
        #[arg(long, group = "source")]
        preset: Option<String>,
        /// FP32 or quantized checkpoint.
        #[arg(long, group = "source")]
        checkpoint: Option<PathBuf>,
        /// Also measure a forward pass and list divergences.
        #[arg(long)]
        empirical: bool,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ranked configs that fit a byte budget.
    Plan {
        #[arg(long)]
        budget: u64,
        #[arg(long, default_value = "embbert")]
        arch: String,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[arg(long, default_value_t = 4)]
        p_w: u32,
        #[arg(long, default_value_t = 4)]
        p_a: u32,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learns a BPE vocabulary from the corpus.
    TokenizeTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `[paths] corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Defaults to the model's `v`.
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes on the configured dataset and keeps the best epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// MLM + NSP pretraining on the configured corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses as `step mlm_nsp nsp` columns.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Converts an FP32 checkpoint to FP8 with FP16 outliers.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on one split of the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[paths] checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form counts of the presets next to the published table.
    Report {
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::NonFinite(_)
        | Error::NoGradient(_)
        | Error::Precision { .. }
        | Error::AlreadyFrozen
        | Error::ShapeMismatch { .. }
        | Error::EmptyCandidates
        | Error::Fp8Range(_)
        | Error::Unsupported(_) => 3,
        Error::EvenKernel(_)
        | Error::ChannelMismatch { .. }
        | Error::TokenOutOfRange { .. }
        | Error::SegmentOutOfRange(_)
        | Error::SequenceLength { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidConfig(_)
        | Error::MissingParameter { .. }
        | Error::ConfigMismatch(_)
        | Error::EmptySearchSpace(_)
        | Error::VocabTooSmall { .. }
        | Error::DatasetTooSmall(_)
        | Error::LengthMismatch(..)
        | Error::Format(_)
        | Error::Parse { .. }
        | Error::Json(_) => 2,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs one command line (`argv[0]` is the program name) against the given
/// streams and returns the exit code.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    let _ = writeln!(err, "tlmk: error[usage]: {}", one_line(first));
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "tlmk: error[usage]: {}", one_line(&m));
            1
        }
        Err(Failure::Lib(e)) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "validation" } else { "runtime" };
            let _ = writeln!(err, "tlmk: error[{kind}]: {}", one_line(&e.to_string()));
            code
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run_command(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Worker threads: available cores, capped by `TLMK_THREADS`.
pub fn thread_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("TLMK_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(cores),
        _ => cores,
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Analyze {
            config,
            preset,
            checkpoint,
            empirical,
            json: as_json,
            out: path,
            seed,
        } => {
            let text = cmd_analyze(config, preset, checkpoint, empirical, as_json, seed)?;
            emit(out, path.as_deref(), &text)?;
        }
        Command::Plan {
            budget,
            arch,
            limit,
            p_w,
            p_a,
            json: as_json,
            out: path,
        } => {
            let arch = Arch::from_name(&arch)?;
            let space = SearchSpace {
                p_w,
                p_a,
                ..SearchSpace::with_budget(budget)
            };
            let c = enumerate_feasible(&space, arch)?;
            let text = if as_json {
                json(&c.iter().take(limit).collect::<Vec<_>>())?
            } else {
                format!(
                    "# {} feasible {} configs within {} B\n{}",
                    c.len(),
                    arch,
                    budget,
                    candidates_to_text(&c, limit)
                )
            };
            emit(out, path.as_deref(), &text)?;
        }
        Command::TokenizeTrain {
            config,
            corpus,
            vocab_size,
            out: path,
        } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let corpus = match corpus {
                Some(c) => c,
                None => cfg.require_path("corpus", &cfg.paths.corpus)?.to_path_buf(),
            };
            let v = match (vocab_size, &cfg.model) {
                (Some(v), _) => v,
                (None, Some(m)) => m.v,
                (None, None) => return Err(Failure::Usage("give --vocab-size or a config with [model]".into())),
            };
            let text = std::fs::read_to_string(&corpus)?;
            let vocab = train_bpe(text.lines(), v)?;
            vocab.save(&path)?;
            writeln!(
                out,
                "vocab {} entries ({} used, {} merges) -> {}",
                vocab.size(),
                vocab.used(),
                vocab.merge_count(),
                path.display()
            )?;
        }
        Command::Train {
            config,
            out: path,
            history,
            seed,
        } => cmd_train(&config, &path, history, seed, out)?,
        Command::Pretrain {
            config,
            out: path,
            log,
            seed,
        } => cmd_pretrain(&config, &path, log, seed, out)?,
        Command::Quantize { input, out: path } => {
            let model = load_checkpoint(&input)?;
            let q = quantize_model(&model)?;
            q.save(&path)?;
            let r = quantized_memory(&q)?;
            writeln!(
                out,
                "quantized W_total {}, outlier fraction {:.6}, {} B total vs {} B FP32 ({:.3}x) -> {}",
                r.w_total,
                r.outlier_fraction,
                r.bytes_total,
                r.fp32_bytes,
                r.reduction,
                path.display()
            )?;
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            seed,
            json: as_json,
            out: path,
        } => {
            let text = cmd_eval(&config, checkpoint, &split, seed, as_json)?;
            emit(out, path.as_deref(), &text)?;
        }
        Command::Report { json: as_json, out: path } => {
            let rows = table_report()?;
            let text = if as_json {
                json(&rows)?
            } else {
                report::rows_to_text(&rows)
            };
            emit(out, path.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::presets()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| c)
        .ok_or_else(|| {
            let names: Vec<&str> = ModelConfig::presets().iter().map(|(n, _)| *n).collect();
            Error::InvalidArgument(format!("unknown preset `{name}`; known: {}", names.join(", ")))
        })
}

fn cmd_analyze(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    checkpoint: Option<PathBuf>,
    empirical: bool,
    as_json: bool,
    seed: u64,
) -> std::result::Result<String, Failure> {
    let mut quantized = None;
    let mut model = None;
    let cfg = if let Some(p) = config {
        RunConfig::load(&p)?.require_model()?.clone()
    } else if let Some(n) = preset_name {
        preset(&n)?
    } else if let Some(p) = checkpoint {
        let bytes = std::fs::read(&p)?;
        if is_quantized_container(&bytes)? {
            let q = QuantizedModel::from_bytes(&bytes)?;
            let c = q.config.clone();
            quantized = Some(q);
            c
        } else {
            let m = load_checkpoint(&p)?;
            let c = m.config.clone();
            model = Some(m);
            c
        }
    } else {
        return Err(Failure::Usage("analyze needs --config, --preset or --checkpoint".into()));
    };
    let report = analyze(&cfg)?;
    let qmem = quantized.as_ref().map(quantized_memory).transpose()?;
    let measured = if empirical {
        let m = match (model, &quantized) {
            (Some(m), _) => m,
            (None, Some(q)) => q.dequantize()?,
            (None, None) => build_model(&cfg, sub_seed(seed, MODEL_INIT))?,
        };
        let tokens: Vec<usize> = (0..cfg.seq_len).map(|i| i % cfg.v).collect();
        Some(empirical_profile(&m, &tokens)?)
    } else {
        None
    };
    if as_json {
        let doc = serde_json::json!({
            "analytic": report,
            "quantized": qmem,
            "empirical": measured,
        });
        return Ok(json(&doc)?);
    }
    let mut text = report.to_text();
    if let Some(q) = qmem {
        text.push_str(&format!(
            "quantized: {} outliers ({:.6}), weights {} B, activations {} B, total {} B\n\
             FP32 total {} B, reduction {:.3}x\n",
            q.outliers, q.outlier_fraction, q.weight_bytes, q.activation_bytes, q.bytes_total, q.fp32_bytes, q.reduction
        ));
    }
    if let Some(m) = measured {
        text.push_str(&m.to_text());
        text.push_str(&divergences_to_text(&compare_reports(&report, &m)?));
    }
    Ok(text)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.pretrain.seed = s;
    }
    cfg.train.threads = thread_count();
    cfg.pretrain.threads = cfg.train.threads;
    Ok(cfg)
}

fn load_vocab(cfg: &RunConfig, model: &ModelConfig) -> Result<BpeVocab> {
    let vocab = BpeVocab::load(cfg.require_path("vocab", &cfg.paths.vocab)?)?;
    if vocab.size() != model.v {
        return Err(Error::ConfigMismatch(format!(
            "vocabulary has {} entries, model expects v = {}",
            vocab.size(),
            model.v
        )));
    }
    Ok(vocab)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let p = &cfg.paths;
    let main = load_tsv(cfg.require_path("dataset", &p.dataset)?)?;
    let official = match (&p.dataset_val, &p.dataset_test) {
        (None, None) => OfficialSplits::None(main),
        (None, Some(t)) => OfficialSplits::Two(main, load_tsv(t)?),
        (Some(v), Some(t)) => OfficialSplits::Three {
            train: main,
            val: load_tsv(v)?,
            test: load_tsv(t)?,
        },
        (Some(_), None) => {
            return Err(Error::InvalidConfig("dataset_val needs dataset_test".into()));
        }
    };
    split_dataset(official, sub_seed(cfg.seed, DATA_SPLIT))
}

struct Prepared {
    labels: Vec<String>,
    splits: Splits,
    vocab: BpeVocab,
    max_tokens: usize,
}

fn prepare(cfg: &RunConfig, model: &ModelConfig) -> Result<Prepared> {
    let vocab = load_vocab(cfg, model)?;
    let splits = load_splits(cfg)?;
    let labels = match cfg.task {
        MetricTask::Classify => {
            let all: Vec<_> = splits.train.iter().chain(&splits.val).chain(&splits.test).cloned().collect();
            let l = label_set(&all);
            if l.len() < 2 {
                return Err(Error::InvalidArgument(format!("need at least 2 labels, found {}", l.len())));
            }
            l
        }
        MetricTask::Regress => Vec::new(),
    };
    let max_tokens = cfg.max_tokens.unwrap_or(model.seq_len - 1);
    if max_tokens + 1 > model.seq_len || max_tokens == 0 {
        return Err(Error::InvalidConfig(format!(
            "max_tokens must lie in 1..={} for seq_len {}",
            model.seq_len - 1,
            model.seq_len
        )));
    }
    Ok(Prepared {
        labels,
        splits,
        vocab,
        max_tokens,
    })
}

enum Start {
    Fp32(Model),
    Quantized(QuantizedModel),
}

fn starting_point(cfg: &RunConfig) -> Result<Start> {
    match &cfg.paths.checkpoint {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            let start = if is_quantized_container(&bytes)? {
                Start::Quantized(QuantizedModel::from_bytes(&bytes)?)
            } else {
                Start::Fp32(load_checkpoint(p)?)
            };
            let c = match &start {
                Start::Fp32(m) => &m.config,
                Start::Quantized(q) => &q.config,
            };
            if let Some(m) = &cfg.model {
                if m != c {
                    return Err(Error::ConfigMismatch("[model] differs from the checkpoint's config".into()));
                }
            }
            Ok(start)
        }
        None => Ok(Start::Fp32(build_model(cfg.require_model()?, sub_seed(cfg.seed, MODEL_INIT))?)),
    }
}

fn cmd_train(config: &Path, path: &Path, history: Option<PathBuf>, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let start = starting_point(&cfg)?;
    let model_cfg = match &start {
        Start::Fp32(m) => m.config.clone(),
        Start::Quantized(q) => q.config.clone(),
    };
    let prep = prepare(&cfg, &model_cfg)?;
    let encode = |r| encode_examples(&prep.vocab, r, cfg.task, &prep.labels, prep.max_tokens);
    let outputs = match cfg.task {
        MetricTask::Classify => prep.labels.len(),
        MetricTask::Regress => 1,
    };
    let data = TaskData {
        task: cfg.task,
        outputs,
        train: encode(&prep.splits.train)?,
        val: encode(&prep.splits.val)?,
    };
    let history_path = history.unwrap_or_else(|| {
        let mut s = path.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    });
    let (hist, best_epoch, best_score) = match start {
        Start::Quantized(q) => {
            let mut s = cfg.train.clone();
            if cfg.mode != crate::model::MaskMode::Peft {
                return Err(Error::InvalidConfig("a quantized checkpoint can only be trained with mode = peft".into()));
            }
            s.threads = cfg.train.threads;
            let o = train_peft_quantized(&q, &data, &s)?;
            o.model.save(path)?;
            (o.history, o.best_epoch, o.best_score)
        }
        Start::Fp32(mut m) => {
            let head_ok = m.head.as_ref().is_some_and(|h| h.classes() == outputs);
            if !head_ok {
                let head_seed = sub_seed(cfg.seed, HEAD_INIT);
                match cfg.task {
                    MetricTask::Classify => m.attach_head(outputs, head_seed)?,
                    MetricTask::Regress => m.attach_regression_head(head_seed),
                }
            }
            let mask = trainable_mask(&m, cfg.mode);
            let o = train_classifier(&m, &data, &cfg.train, &mask)?;
            save_checkpoint(&o.best, path)?;
            (o.history, o.best_epoch, o.best_score)
        }
    };
    std::fs::write(&history_path, hist.to_jsonl()?)?;
    writeln!(
        out,
        "trained {} epochs ({} steps), best epoch {} with {:?} {:.6} -> {}",
        hist.epochs.len(),
        hist.epochs.last().map_or(0, |e| e.steps),
        best_epoch,
        cfg.train.selection_metric,
        best_score,
        path.display()
    )?;
    Ok(())
}

fn cmd_pretrain(config: &Path, path: &Path, log: Option<PathBuf>, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let model = match starting_point(&cfg)? {
        Start::Fp32(m) => m,
        Start::Quantized(_) => {
            return Err(Error::Unsupported("pretraining starts from an FP32 checkpoint".into()));
        }
    };
    let vocab = load_vocab(&cfg, &model.config)?;
    let text = std::fs::read_to_string(cfg.require_path("corpus", &cfg.paths.corpus)?)?;
    let sentences: Vec<Vec<usize>> = text
        .lines()
        .map(|l| vocab.encode(l))
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.len() < 2 {
        return Err(Error::DatasetTooSmall(sentences.len()));
    }
    let o = pretrain_mlm_nsp(&model, &sentences, &cfg.pretrain, MaskingRule::default())?;
    save_checkpoint(&o.model, path)?;
    if let Some(l) = log {
        let mut s = String::from("# step mlm_nsp nsp\n");
        for (i, (a, b)) in o.losses.iter().zip(&o.nsp_losses).enumerate() {
            s.push_str(&format!("{i} {a} {b}\n"));
        }
        std::fs::write(l, s)?;
    }
    writeln!(
        out,
        "pretrained {} steps on {} sentences, final loss {:.6} -> {}",
        o.steps,
        sentences.len(),
        o.losses.last().copied().unwrap_or(0.0),
        path.display()
    )?;
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: Option<PathBuf>,
    split: &str,
    seed: Option<u64>,
    as_json: bool,
) -> Result<String> {
    let mut cfg = load_config(config, seed)?;
    if let Some(c) = checkpoint {
        cfg.paths.checkpoint = Some(c);
    }
    if cfg.paths.checkpoint.is_none() {
        return Err(Error::InvalidConfig("eval needs a checkpoint".into()));
    }
    let model = match starting_point(&cfg)? {
        Start::Fp32(m) => m,
        Start::Quantized(q) => q.dequantize()?,
    };
    let prep = prepare(&cfg, &model.config)?;
    let records = match split {
        "train" => &prep.splits.train,
        "val" => &prep.splits.val,
        "test" => &prep.splits.test,
        other => return Err(Error::InvalidArgument(format!("split must be train|val|test, got `{other}`"))),
    };
    let examples = encode_examples(&prep.vocab, records, cfg.task, &prep.labels, prep.max_tokens)?;
    let m = evaluate(&model, &examples, cfg.task, cfg.train.threads)?;
    if as_json {
        return json(&serde_json::json!({ "split": split, "examples": examples.len(), "metrics": m }));
    }
    let mut s = format!("split {split}: {} examples\n", examples.len());
    let mut line = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            s.push_str(&format!("{name} {v:.6}\n"));
        }
    };
    line("accuracy", m.accuracy);
    line("macro_f1", m.macro_f1);
    line("mcc", m.mcc);
    line("scc", m.scc);
    if let Some(c) = &m.confusion {
        s.push_str("confusion (rows true, columns predicted)\n");
        for row in c {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
    }
    Ok(s)
}
