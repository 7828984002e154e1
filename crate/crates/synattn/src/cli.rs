//! Command-line surface tying the pipeline together.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Every run that
//! produces an output artifact also writes its fully resolved
//! configuration next to it as `<output>.config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::conllu::{parse_conllu, ParsedSentence, Vocab};
use crate::deptree::{mask_from_distance, NEG_INF};
use crate::model::{init_params, ModelConfig};
use crate::numcore::ParamSet;
use crate::train::{
    eval_probe, featurize, finetune, full_model_grad_check, logs_to_jsonl, make_structure_task,
    make_tree_corpus, pretrain_gat, TrainConfig, TrainError, Trainer,
};

/// Magic prefix of the binary corpus files written by `preprocess`.
pub const BATCH_MAGIC: &[u8; 8] = b"SYNBATC1";

#[derive(Parser)]
#[command(
    name = "synattn",
    about = "Syntax-augmented transformer attention over dependency trees",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a CoNLL-U corpus into a binary batch file with its vocabulary.
    Preprocess {
        /// Input CoNLL-U file.
        #[arg(long)]
        input: PathBuf,
        /// Output binary batch file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Pre-train the GAT, probe, and shared embeddings on tree structure.
    PretrainGat {
        /// Input corpus (CoNLL-U text or a preprocessed batch file).
        #[arg(long)]
        input: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        output: PathBuf,
        /// Metrics log (JSON lines); defaults to `<output>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Jointly fine-tune the full model on a labeled corpus.
    Train {
        /// Input corpus (CoNLL-U text or a preprocessed batch file).
        #[arg(long)]
        input: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        output: PathBuf,
        /// Metrics log (JSON lines); defaults to `<output>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Warm-start the GAT/probe/embeddings from this checkpoint.
        #[arg(long)]
        gat_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Decode trees from a checkpoint's probe and score them against gold.
    EvalProbe {
        /// Input corpus (CoNLL-U text or a preprocessed batch file).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score word positions only, excluding [CLS]/[SEP] and
        /// continuation pieces.
        #[arg(long)]
        words_only: bool,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print distance matrix, delta-mask, and depths for each sentence.
    Inspect {
        /// Input corpus (CoNLL-U text or a preprocessed batch file).
        #[arg(long)]
        input: PathBuf,
        /// Restrict output to one sentence id.
        #[arg(long)]
        sent_id: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Finite-difference check of the full joint loss; prints max error.
    GradCheck {
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Emit a synthetic corpus.
    MakeTask {
        /// `structure` (labeled even-depth-NOUN task) or `trees`
        /// (unlabeled random trees).
        #[arg(long, default_value = "structure")]
        kind: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        /// Maximum words per tree (trees kind only).
        #[arg(long, default_value_t = 12)]
        max_words: usize,
        /// Output CoNLL-U file.
        #[arg(long)]
        output: PathBuf,
    },
}

/// ModelConfig overrides; flags mirror the field names verbatim.
#[derive(Args, Serialize)]
struct ModelFlags {
    /// JSON config document; flags override its fields.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    gat_layers: Option<usize>,
    #[arg(long)]
    gat_heads: Option<usize>,
    #[arg(long)]
    d_g: Option<usize>,
    #[arg(long)]
    delta: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated layer indices, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    syntax_layers: Option<Vec<usize>>,
    /// Comma-separated head indices, e.g. `0,3`.
    #[arg(long, value_delimiter = ',')]
    syntax_heads: Option<Vec<usize>>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    probe_rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    /// Base config (JSON file or desk default) with flag overrides.
    fn resolve(&self, vocab_len: Option<usize>) -> Result<ModelConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?
            }
            None => ModelConfig::desk_default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        over!(
            n_layers, n_heads, d_model, d_k, d_v, vocab_size, gat_layers, gat_heads, d_g, delta,
            alpha, syntax_layers, syntax_heads, max_len, n_labels, seed
        );
        if let Some(m) = self.probe_rank {
            cfg.probe_rank = Some(m);
        }
        if cfg.vocab_size == 0 {
            if let Some(n) = vocab_len {
                cfg.vocab_size = n;
            }
        }
        cfg.validate().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(cfg)
    }
}

/// TrainConfig overrides.
#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Total optimizer steps; overrides `--epochs`.
    #[arg(long)]
    steps: Option<usize>,
    /// Passes over the corpus (steps = epochs * ceil(n / batch_size)).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    stop_grad_embed: bool,
    #[arg(long)]
    words_only_probe: bool,
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self, mut tcfg: TrainConfig, corpus_len: usize) -> TrainConfig {
        if let Some(v) = self.lr {
            tcfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            tcfg.batch_size = v;
        }
        if let Some(v) = self.steps {
            tcfg.steps = v;
        } else if let Some(e) = self.epochs {
            tcfg.steps = e * corpus_len.div_ceil(tcfg.batch_size);
        }
        if let Some(v) = self.eval_every {
            tcfg.eval_every = v;
        }
        if self.stop_grad_embed {
            tcfg.stop_grad_embed = true;
        }
        if self.words_only_probe {
            tcfg.words_only_probe = true;
        }
        if let Some(v) = self.clip_norm {
            tcfg.clip_norm = Some(v);
        }
        tcfg
    }
}

enum CliError {
    Data(String),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {}", msg);
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Preprocess { input, output } => preprocess(&input, &output),
        Command::PretrainGat {
            input,
            output,
            log,
            model,
            train,
        } => run_training(&input, &output, log, model, train, None, true),
        Command::Train {
            input,
            output,
            log,
            gat_checkpoint,
            model,
            train,
        } => run_training(&input, &output, log, model, train, gat_checkpoint, false),
        Command::EvalProbe {
            input,
            checkpoint,
            words_only,
            model,
        } => eval_probe_cmd(&input, &checkpoint, words_only, model),
        Command::Inspect {
            input,
            sent_id,
            model,
        } => inspect(&input, sent_id.as_deref(), model),
        Command::GradCheck { model } => grad_check_cmd(model),
        Command::MakeTask {
            kind,
            seed,
            size,
            max_words,
            output,
        } => make_task(&kind, seed, size, max_words, &output),
    }
}

/// Read a corpus: a `preprocess` batch file (with its frozen vocab) or
/// CoNLL-U text (vocab built from the corpus words).
pub fn load_corpus(path: &Path) -> Result<(Vec<ParsedSentence>, Vocab), CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError(format!("{}: {}", path.display(), e)))?;
    if bytes.starts_with(BATCH_MAGIC) {
        let mut cursor = BATCH_MAGIC.len();
        let mut take = |label: &str| -> Result<String, CorpusError> {
            if bytes.len() < cursor + 8 {
                return Err(CorpusError(format!("truncated batch file ({})", label)));
            }
            let len =
                u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
            cursor += 8;
            if bytes.len() < cursor + len {
                return Err(CorpusError(format!("truncated batch file ({})", label)));
            }
            let s = String::from_utf8(bytes[cursor..cursor + len].to_vec())
                .map_err(|e| CorpusError(format!("batch file {}: {}", label, e)))?;
            cursor += len;
            Ok(s)
        };
        let vocab_text = take("vocab")?;
        let corpus_text = take("corpus")?;
        let sentences = parse_conllu(&corpus_text).map_err(|e| CorpusError(e.to_string()))?;
        Ok((sentences, Vocab::from_lines(&vocab_text)))
    } else {
        let text =
            String::from_utf8(bytes).map_err(|e| CorpusError(format!("{}: {}", path.display(), e)))?;
        let sentences = parse_conllu(&text).map_err(|e| CorpusError(e.to_string()))?;
        let vocab = Vocab::from_corpus(sentences.iter().flat_map(|s| s.words.iter().map(|w| w.as_str())));
        Ok((sentences, vocab))
    }
}

/// Corpus loading failure (I/O, framing, or CoNLL-U syntax).
pub struct CorpusError(pub String);

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        CliError::Data(e.0)
    }
}

fn preprocess(input: &Path, output: &Path) -> Result<(), CliError> {
    let (sentences, vocab) = load_corpus(input)?;
    let corpus_text: String = sentences
        .iter()
        .map(|s| {
            let mut b = s.to_conllu();
            b.push('\n');
            b
        })
        .collect();
    let vocab_text = vocab.to_lines();
    let mut out = Vec::new();
    out.extend_from_slice(BATCH_MAGIC);
    out.extend_from_slice(&(vocab_text.len() as u64).to_le_bytes());
    out.extend_from_slice(vocab_text.as_bytes());
    out.extend_from_slice(&(corpus_text.len() as u64).to_le_bytes());
    out.extend_from_slice(corpus_text.as_bytes());
    fs::write(output, out)?;
    write_run_config(output, &serde_json::json!({
        "subcommand": "preprocess",
        "input": input.display().to_string(),
        "sentences": sentences.len(),
        "vocab_size": vocab.len(),
    }))?;
    println!("wrote {} sentences, vocab {}", sentences.len(), vocab.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    input: &Path,
    output: &Path,
    log: Option<PathBuf>,
    model: ModelFlags,
    train: TrainFlags,
    gat_checkpoint: Option<PathBuf>,
    pretrain: bool,
) -> Result<(), CliError> {
    let (sentences, vocab) = load_corpus(input)?;
    let cfg = model.resolve(Some(vocab.len()))?;
    let base = if pretrain {
        TrainConfig::pretrain_default()
    } else {
        TrainConfig::finetune_default()
    };
    let tcfg = train.resolve(base, sentences.len());
    let counts = init_params(&cfg).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "parameters: total {} (gat {}, probe {}, encoder {})",
        counts.n_scalars(),
        counts.n_scalars_with_prefix("gat."),
        counts.n_scalars_with_prefix("probe."),
        counts.n_scalars() - counts.n_scalars_with_prefix("gat.") - counts.n_scalars_with_prefix("probe.")
    );
    let (trainer, logs) = if pretrain {
        pretrain_gat(&sentences, &vocab, cfg.clone(), tcfg.clone())?
    } else {
        let ckpt = match &gat_checkpoint {
            Some(path) => {
                let bytes = fs::read(path)?;
                Some(
                    ParamSet::read_from(&mut bytes.as_slice())
                        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?,
                )
            }
            None => None,
        };
        finetune(&sentences, &vocab, cfg.clone(), tcfg.clone(), ckpt.as_ref())?
    };
    save_trainer(&trainer, output)?;
    let log_path = log.unwrap_or_else(|| suffixed(output, ".log.jsonl"));
    fs::write(&log_path, logs_to_jsonl(&logs))?;
    write_run_config(output, &serde_json::json!({
        "subcommand": if pretrain { "pretrain-gat" } else { "train" },
        "input": input.display().to_string(),
        "model": cfg,
        "train": tcfg,
    }))?;
    if let Some(last) = logs.last() {
        println!(
            "final window: l_task {:.6} l_dist {:.6} l_depth {:.6} accuracy {:.4}",
            last.l_task, last.l_dist, last.l_depth, last.accuracy
        );
    }
    Ok(())
}

fn save_trainer(trainer: &Trainer, output: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    trainer.save_state(&mut buf)?;
    fs::write(output, buf)?;
    Ok(())
}

fn eval_probe_cmd(
    input: &Path,
    checkpoint: &Path,
    words_only: bool,
    model: ModelFlags,
) -> Result<(), CliError> {
    let (sentences, vocab) = load_corpus(input)?;
    let cfg = model.resolve(Some(vocab.len()))?;
    let bytes = fs::read(checkpoint)?;
    let params = ParamSet::read_from(&mut bytes.as_slice())
        .map_err(|e| CliError::Data(format!("{}: {}", checkpoint.display(), e)))?;
    let feats = sentences
        .iter()
        .map(|s| featurize(s, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = eval_probe(&cfg, &params, &feats, words_only)?;
    for (sent_id, m) in &metrics {
        println!(
            "{}",
            serde_json::json!({
                "sent_id": sent_id,
                "uuas": m.uuas,
                "root_correct": m.root_correct,
                "spearman": m.spearman,
            })
        );
    }
    let n = metrics.len() as f64;
    let uuas = metrics.iter().map(|(_, m)| m.uuas).sum::<f64>() / n;
    let root = metrics.iter().filter(|(_, m)| m.root_correct).count() as f64 / n;
    let spearman = metrics.iter().map(|(_, m)| m.spearman).sum::<f64>() / n;
    println!(
        "{}",
        serde_json::json!({
            "summary": {"uuas": uuas, "root_accuracy": root, "spearman": spearman}
        })
    );
    Ok(())
}

fn inspect(input: &Path, sent_id: Option<&str>, model: ModelFlags) -> Result<(), CliError> {
    let (sentences, vocab) = load_corpus(input)?;
    let cfg = model.resolve(Some(vocab.len()))?;
    let mut shown = 0usize;
    for s in &sentences {
        if let Some(want) = sent_id {
            if s.sentence_id != want {
                continue;
            }
        }
        let f = featurize(s, &vocab)?;
        print!("{}", inspect_report(&f.sentence.sentence_id, &f.dist, cfg.delta, &f.depths.depths));
        shown += 1;
    }
    if shown == 0 {
        return Err(CliError::Data(match sent_id {
            Some(id) => format!("no sentence with sent_id {:?}", id),
            None => "empty corpus".to_string(),
        }));
    }
    Ok(())
}

/// `# sent_id`, the integer distance grid, the 0/-inf mask grid, and
/// the depth row, one grid row per line.
pub fn inspect_report(
    sent_id: &str,
    dist: &crate::deptree::DistanceMatrix,
    delta: u32,
    depths: &[u32],
) -> String {
    let mut out = String::new();
    out.push_str(&format!("# {}\n", sent_id));
    for i in 0..dist.n {
        let row: Vec<String> = (0..dist.n).map(|j| dist.get(i, j).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push('\n');
    let mask = mask_from_distance(dist, delta);
    for i in 0..mask.n {
        let row: Vec<String> = (0..mask.n)
            .map(|j| {
                let v = mask.m[i * mask.n + j];
                if v == NEG_INF {
                    "-inf".to_string()
                } else {
                    format!("{}", v as i64)
                }
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push('\n');
    let row: Vec<String> = depths.iter().map(|d| d.to_string()).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
    out
}

fn grad_check_cmd(model: ModelFlags) -> Result<(), CliError> {
    let doc = "\
# sent_id = grad-check\n# label = 1
1\tthe\t_\tDET\t_\t_\t2\tdet\t_\t_
2\tdog\t_\tNOUN\t_\t_\t3\tnsubj\t_\t_
3\tsleeps\t_\tVERB\t_\t_\t0\troot\t_\t_
4\tsoundly\t_\tADV\t_\t_\t3\tadvmod\t_\t_
";
    let sentences = parse_conllu(doc).map_err(|e| CliError::Data(e.to_string()))?;
    let vocab =
        Vocab::from_corpus(sentences.iter().flat_map(|s| s.words.iter().map(|w| w.as_str())));
    let mut cfg = grad_check_default();
    cfg.vocab_size = vocab.len();
    if model.config.is_some() || model.n_layers.is_some() {
        cfg = model.resolve(Some(vocab.len()))?;
    }
    let err = full_model_grad_check(&cfg, &sentences, &vocab, 1e-5)?;
    println!("max relative error: {:.3e}", err);
    Ok(())
}

/// Tiny configuration used by the `grad-check` subcommand: 2 layers,
/// 2 heads, 6 positions fit comfortably, alpha = 0.5.
pub fn grad_check_default() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_k: 4,
        d_v: 4,
        vocab_size: 0,
        gat_layers: 2,
        gat_heads: 2,
        d_g: 4,
        delta: 2,
        alpha: 0.5,
        syntax_layers: vec![0, 1],
        syntax_heads: vec![0],
        max_len: 16,
        n_labels: 2,
        probe_rank: None,
        seed: 9,
    }
}

fn make_task(
    kind: &str,
    seed: u64,
    size: usize,
    max_words: usize,
    output: &Path,
) -> Result<(), CliError> {
    let doc = match kind {
        "structure" => make_structure_task(seed, size),
        "trees" => make_tree_corpus(seed, size, max_words),
        other => {
            return Err(CliError::Data(format!(
                "unknown task kind {:?} (expected `structure` or `trees`)",
                other
            )))
        }
    };
    fs::write(output, &doc)?;
    write_run_config(output, &serde_json::json!({
        "subcommand": "make-task",
        "kind": kind,
        "seed": seed,
        "size": size,
        "max_words": max_words,
    }))?;
    println!("wrote {} examples", size);
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_run_config(output: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let path = suffixed(output, ".config.json");
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
