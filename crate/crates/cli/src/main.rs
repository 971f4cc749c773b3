//! `delt`: file-to-file pipeline stages for data scoring, selection,
//! ordering, tiny-LM training, evaluation, and reporting.
//!
//! Stages communicate only through files so each one is independently
//! testable and cacheable. All randomness flows from explicit `--seed`
//! flags; identical inputs always produce identical outputs.
//!
//! Exit codes: 0 success, 1 domain error (one-line diagnostic on stderr),
//! 2 usage error.

mod merge;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use delt_core::annotate::{annotate_proxy, save_annotation, AnnotationConfig};
use delt_core::corpus::{load_jsonl, read_scores, write_scores, Corpus, Tokenizer, VOCAB_SIZE};
use delt_core::harness::synth::{synth_corpus, synth_eval, SynthConfig};
use delt_core::harness::{
    evaluate, score_corpus, train_lm, write_report, ExperimentReport, ExperimentRow, Scorer,
    TrainConfig,
};
use delt_core::pipeline::{
    compose, select_topk, write_ordered, OrderingConfig, OrderingManifest, OrderingStrategy,
};
use delt_core::regressor::RegressorConfig;
use delt_core::tinylm::{load_checkpoint, save_checkpoint, LossReduction, ModelConfig};

use merge::{CliError, Merge};

#[derive(Parser)]
#[command(
    name = "delt",
    version,
    about = "Score, select, order, and train on text corpora with a built-in tiny LM"
)]
struct Cli {
    /// Cap the worker pool used for per-sample evaluations
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON file with default flag values; explicit flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score every corpus sample and write a score file
    Score(ScoreArgs),
    /// Annotate a proxy corpus with gradient-based weights
    Annotate(AnnotateArgs),
    /// Keep the top-K samples by score
    Select(SelectArgs),
    /// Reorder a corpus (shuffle, sort, or fold)
    Order(OrderArgs),
    /// Train the tiny LM on a corpus in its file order
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out corpus
    Eval(EvalArgs),
    /// Aggregate evaluation rows into a CSV and a summary table
    Report(ReportArgs),
    /// Generate a synthetic corpus (clean text plus optional noise)
    Synth(SynthArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Context window of the tiny LM [default: 8]
    #[arg(long)]
    context_window: Option<usize>,
    /// Embedding dimension [default: 16]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Hidden layer width [default: 32]
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Sum per-sample loss over token positions instead of averaging
    #[arg(long)]
    loss_sum: bool,
}

impl ModelFlags {
    fn resolve(&self, m: &Merge, seed: u64) -> ModelConfig {
        ModelConfig {
            context_window: m.usize(self.context_window, "context_window", 8),
            embed_dim: m.usize(self.embed_dim, "embed_dim", 16),
            hidden_dim: m.usize(self.hidden_dim, "hidden_dim", 32),
            vocab_size: VOCAB_SIZE,
            seed,
            loss_reduction: if m.flag(self.loss_sum, "loss_sum") {
                LossReduction::TokenSum
            } else {
                LossReduction::TokenMean
            },
        }
    }
}

#[derive(Args)]
struct AnnotationFlags {
    /// Forward-loop step count [default: 6]
    #[arg(long)]
    steps: Option<usize>,
    /// Forward-loop learning rate [default: 0.5]
    #[arg(long)]
    eta: Option<f64>,
    /// Weight-update step size [default: 0.001]
    #[arg(long)]
    alpha: Option<f64>,
    /// Proxy subsample size for gradient scorers [default: 64]
    #[arg(long)]
    proxy_size: Option<usize>,
    /// Outer annotation passes [default: 1]
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Keep forward-loop gradients in memory [default: false]
    #[arg(long)]
    cache_gradients: bool,
    #[command(flatten)]
    model: ModelFlags,
}

impl AnnotationFlags {
    fn resolve(&self, m: &Merge, seed: u64) -> AnnotationConfig {
        AnnotationConfig {
            steps: m.usize(self.steps, "steps", 6),
            eta: m.f64(self.eta, "eta", 0.5),
            alpha: m.f64(self.alpha, "alpha", 1e-3),
            proxy_size: m.usize(self.proxy_size, "proxy_size", 64),
            seed,
            outer_iters: m.usize(self.outer_iters, "outer_iters", 1),
            model: self.model.resolve(m, seed),
            cache_gradients: m.flag(self.cache_gradients, "cache_gradients"),
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Scoring method: kenlm, pds, lqs, or file
    #[arg(long)]
    scorer: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Output score file (JSONL: id, score)
    #[arg(long)]
    out: PathBuf,
    /// Held-out corpus for gradient-based scorers
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Existing score file for --scorer file
    #[arg(long)]
    scores_file: Option<PathBuf>,
    /// N-gram order for kenlm [default: 3]
    #[arg(long)]
    ngram_order: Option<usize>,
    /// Add-k smoothing for kenlm [default: 0.1]
    #[arg(long)]
    smoothing: Option<f64>,
    /// Regressor epochs when generalizing proxy scores [default: 400]
    #[arg(long)]
    regressor_epochs: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
    #[command(flatten)]
    annotation: AnnotationFlags,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    proxy: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Output annotation document (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Also write the final tiny-LM checkpoint here
    #[arg(long)]
    params_out: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
    #[command(flatten)]
    annotation: AnnotationFlags,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Fraction of samples to keep, in (0, 1]
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct OrderArgs {
    /// Ordering strategy: shuffle, sort_asc, sort_desc, or fold
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score file (required for sort and fold)
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Fold layer count [default: 3]
    #[arg(long)]
    layers: Option<usize>,
    /// Shuffle seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Alternative fold layout starting each run at its minimum
    #[arg(long)]
    offset_order: bool,
    /// Optional top-K selection ratio applied before ordering
    #[arg(long)]
    ratio: Option<f64>,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Epochs over the corpus [default: 1]
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per SGD step [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [default: 0.5]
    #[arg(long)]
    lr: Option<f64>,
    /// Init seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-batch training losses here, one per line
    #[arg(long)]
    curve_out: Option<PathBuf>,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file from `delt train`
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Append-style row file for `delt report` (single JSON line)
    #[arg(long)]
    row_out: Option<PathBuf>,
    /// Ordering label recorded in the row [default: unlabeled]
    #[arg(long)]
    label: Option<String>,
    /// Seed recorded in the row [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Token cap per sample at ingestion [default: 512]
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Row files produced by `delt eval --row-out` (one or more)
    #[arg(long, num_args = 1.., required = true)]
    rows: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of samples [default: 100]
    #[arg(long)]
    samples: Option<usize>,
    /// Fraction of noise samples [default: 0]
    #[arg(long)]
    noise_fraction: Option<f64>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a clean evaluation corpus here
    #[arg(long)]
    eval_out: Option<PathBuf>,
    /// Evaluation corpus size [default: 32]
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Minimum words per clean sample [default: 10]
    #[arg(long)]
    min_words: Option<usize>,
    /// Maximum words per clean sample [default: 18]
    #[arg(long)]
    max_words: Option<usize>,
}

fn load_corpus(path: &Path, max_tokens: usize) -> Result<Corpus, CliError> {
    let tok = Tokenizer::with_max_tokens(max_tokens);
    load_jsonl(path, &tok).map_err(CliError::run)
}

fn cmd_score(args: ScoreArgs, m: &Merge) -> Result<(), CliError> {
    let seed = m.u64(args.seed, "seed", 0);
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let corpus = load_corpus(&args.corpus, max_tokens)?;
    let scorer = match m.string(args.scorer.clone(), "scorer").as_str() {
        "kenlm" => Scorer::Kenlm {
            order: m.usize(args.ngram_order, "ngram_order", 3),
            smoothing: m.f64(args.smoothing, "smoothing", 0.1),
        },
        "pds" => Scorer::Pds,
        "lqs" => Scorer::Lqs,
        "file" => {
            let path = args
                .scores_file
                .clone()
                .ok_or_else(|| CliError::usage("--scorer file requires --scores-file"))?;
            Scorer::ExternalFile { path }
        }
        other => return Err(CliError::usage(format!("unknown scorer {other:?}"))),
    };
    let needs_eval = matches!(scorer, Scorer::Pds | Scorer::Lqs);
    let eval = match (&args.eval, needs_eval) {
        (Some(path), _) => load_corpus(path, max_tokens)?,
        (None, true) => {
            return Err(CliError::usage(format!(
                "--scorer {} requires --eval",
                args.scorer
            )))
        }
        // unused by kenlm / file scorers; any non-empty corpus works
        (None, false) => corpus.clone(),
    };
    let annotation = args.annotation.resolve(m, seed);
    let regressor = RegressorConfig {
        epochs: m.usize(args.regressor_epochs, "regressor_epochs", 400),
        learning_rate: None,
        seed,
    };
    let scores = score_corpus(&corpus, &eval, &scorer, &annotation, &regressor, 0)
        .map_err(CliError::run)?;
    write_scores(&corpus, &scores, &args.out).map_err(CliError::run)?;
    println!("wrote {} scores to {}", scores.len(), args.out.display());
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs, m: &Merge) -> Result<(), CliError> {
    let seed = m.u64(args.seed, "seed", 0);
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let proxy = load_corpus(&args.proxy, max_tokens)?;
    let eval = load_corpus(&args.eval, max_tokens)?;
    let cfg = args.annotation.resolve(m, seed);
    let result = annotate_proxy(&proxy, &eval, &cfg).map_err(CliError::run)?;
    save_annotation(&result, &args.out).map_err(CliError::run)?;
    if let Some(params_out) = &args.params_out {
        save_checkpoint(&result.final_params, params_out).map_err(CliError::run)?;
    }
    println!(
        "annotated {} samples to {}",
        proxy.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_select(args: SelectArgs, m: &Merge) -> Result<(), CliError> {
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let ratio = m
        .f64_opt(args.ratio, "ratio")
        .ok_or_else(|| CliError::usage("--ratio is required"))?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::usage(format!(
            "--ratio must be in (0, 1], got {ratio}"
        )));
    }
    let corpus = load_corpus(&args.corpus, max_tokens)?;
    let scores = read_scores(&args.scores).map_err(CliError::run)?;
    if (ratio * corpus.len() as f64).floor() < 1.0 {
        eprintln!(
            "warning: ratio {ratio} selects zero of {} samples; keeping one",
            corpus.len()
        );
    }
    let selected = select_topk(&corpus, &scores, ratio).map_err(CliError::run)?;
    delt_core::corpus::write_jsonl(&selected, &args.out).map_err(CliError::run)?;
    println!(
        "selected {} of {} samples to {}",
        selected.len(),
        corpus.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_order(args: OrderArgs, m: &Merge) -> Result<(), CliError> {
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let strategy = OrderingStrategy::parse(&m.string(args.strategy.clone(), "strategy"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    let layers = m.usize(args.layers, "layers", 3);
    if layers < 1 {
        return Err(CliError::usage("--layers must be >= 1"));
    }
    let seed = m.u64(args.seed, "seed", 0);
    let offset_order = m.flag(args.offset_order, "offset_order");
    let ratio = m.f64_opt(args.ratio, "ratio");
    if let Some(r) = ratio {
        if !(r > 0.0 && r <= 1.0) {
            return Err(CliError::usage(format!(
                "--ratio must be in (0, 1], got {r}"
            )));
        }
    }
    let needs_scores =
        !matches!(strategy, OrderingStrategy::Shuffle) || ratio.is_some();
    let corpus = load_corpus(&args.corpus, max_tokens)?;
    let scores = match (&args.scores, needs_scores) {
        (Some(path), _) => read_scores(path).map_err(CliError::run)?,
        (None, false) => delt_core::corpus::ScoreVector::uniform(&corpus),
        (None, true) => {
            return Err(CliError::usage(format!(
                "--strategy {} requires --scores",
                strategy.name()
            )))
        }
    };
    let ordering = OrderingConfig {
        strategy,
        layers,
        seed,
        offset_order,
    };
    if let Some(r) = ratio {
        if (r * corpus.len() as f64).floor() < 1.0 {
            eprintln!(
                "warning: ratio {r} selects zero of {} samples; keeping one",
                corpus.len()
            );
        }
    }
    let selection = ratio.map(|r| delt_core::pipeline::SelectionConfig { ratio: r });
    let ordered =
        compose(&corpus, &scores, selection.as_ref(), &ordering).map_err(CliError::run)?;
    let manifest = OrderingManifest {
        scores_source: args
            .scores
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "(none)".into()),
        selection_ratio: ratio,
        strategy: strategy.name().into(),
        layers: matches!(strategy, OrderingStrategy::Fold).then_some(layers),
        seed: matches!(strategy, OrderingStrategy::Shuffle).then_some(seed),
        offset_order,
    };
    write_ordered(&ordered, &args.out, &manifest).map_err(CliError::run)?;
    println!(
        "ordered {} samples ({}) to {}",
        ordered.len(),
        ordering.label(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, m: &Merge) -> Result<(), CliError> {
    let seed = m.u64(args.seed, "seed", 0);
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let corpus = load_corpus(&args.corpus, max_tokens)?;
    let cfg = TrainConfig {
        epochs: m.usize(args.epochs, "epochs", 1),
        batch_size: m.usize(args.batch_size, "batch_size", 16),
        learning_rate: m.f64(args.lr, "lr", 0.5),
        seed,
        model: args.model.resolve(m, seed),
    };
    let (params, curve) = train_lm(&corpus, &cfg).map_err(CliError::run)?;
    save_checkpoint(&params, &args.out).map_err(CliError::run)?;
    if let Some(curve_out) = &args.curve_out {
        let lines: Vec<String> = curve.iter().map(|l| format!("{l}")).collect();
        std::fs::write(curve_out, lines.join("\n") + "\n")
            .map_err(|e| CliError::run_msg(format!("{}: {e}", curve_out.display())))?;
    }
    println!(
        "trained on {} samples ({} batches) to {}",
        corpus.len(),
        curve.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, m: &Merge) -> Result<(), CliError> {
    let max_tokens = m.usize(args.max_tokens, "max_tokens", 512);
    let params = load_checkpoint(&args.params).map_err(CliError::run)?;
    let eval = load_corpus(&args.eval, max_tokens)?;
    let loss = evaluate(&params, &eval).map_err(CliError::run)?;
    println!("final_loss {loss}");
    if let Some(row_out) = &args.row_out {
        let row = serde_json::json!({
            "ordering": m.string_opt(args.label.clone(), "label").unwrap_or_else(|| "unlabeled".into()),
            "seed": m.u64(args.seed, "seed", 0),
            "final_loss": loss,
        });
        std::fs::write(row_out, format!("{row}\n"))
            .map_err(|e| CliError::run_msg(format!("{}: {e}", row_out.display())))?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let mut report = ExperimentReport::default();
    for path in &args.rows {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::run_msg(format!("{}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
                CliError::run_msg(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
            let row = ExperimentRow {
                ordering: value
                    .get("ordering")
                    .and_then(|v| v.as_str())
                    .unwrap_or("unlabeled")
                    .to_string(),
                seed: value.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
                final_loss: value
                    .get("final_loss")
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| {
                        CliError::run_msg(format!(
                            "{} line {}: missing final_loss",
                            path.display(),
                            lineno + 1
                        ))
                    })?,
                curve: Vec::new(),
                wall_secs: 0.0,
            };
            report.rows.push(row);
        }
    }
    write_report(&report, &args.out_dir).map_err(CliError::run)?;
    println!(
        "wrote report for {} rows to {}",
        report.rows.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs, m: &Merge) -> Result<(), CliError> {
    let cfg = SynthConfig {
        samples: m.usize(args.samples, "samples", 100),
        noise_fraction: m.f64(args.noise_fraction, "noise_fraction", 0.0),
        seed: m.u64(args.seed, "seed", 0),
        min_words: m.usize(args.min_words, "min_words", 10),
        max_words: m.usize(args.max_words, "max_words", 18),
    };
    if !(0.0..=1.0).contains(&cfg.noise_fraction) {
        return Err(CliError::usage(format!(
            "--noise-fraction must be in [0, 1], got {}",
            cfg.noise_fraction
        )));
    }
    let corpus = synth_corpus(&cfg).map_err(CliError::run)?;
    delt_core::corpus::write_jsonl(&corpus, &args.out).map_err(CliError::run)?;
    println!("wrote {} samples to {}", corpus.len(), args.out.display());
    if let Some(eval_out) = &args.eval_out {
        let eval = synth_eval(
            m.usize(args.eval_samples, "eval_samples", 32),
            cfg.seed.wrapping_add(1),
        )
        .map_err(CliError::run)?;
        delt_core::corpus::write_jsonl(&eval, eval_out).map_err(CliError::run)?;
        println!("wrote {} eval samples to {}", eval.len(), eval_out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads < 1 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        delt_core::set_thread_count(threads).map_err(CliError::run)?;
    }
    let m = Merge::from_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Score(args) => cmd_score(args, &m),
        Cmd::Annotate(args) => cmd_annotate(args, &m),
        Cmd::Select(args) => cmd_select(args, &m),
        Cmd::Order(args) => cmd_order(args, &m),
        Cmd::Train(args) => cmd_train(args, &m),
        Cmd::Eval(args) => cmd_eval(args, &m),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Synth(args) => cmd_synth(args, &m),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
