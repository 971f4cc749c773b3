//! Experiment harness: train the tiny LM on differently organized corpora,
//! evaluate held-out loss, and aggregate multi-seed comparisons into CSV
//! and text reports.
//!
//! Training deliberately never reshuffles between batches: the corpus order
//! is the experimental variable. Every run is a pure function of its spec;
//! wall-clock timings are kept in memory only and never written to
//! artifacts so repeated runs produce byte-identical files.

pub mod synth;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    annotate_proxy, forward_trajectory, quality_scores, reverse_target_vectors, AnnotationConfig,
};
use crate::corpus::{load_jsonl, read_scores, Corpus, ScoreVector, Tokenizer};
use crate::error::{Error, Result};
use crate::ngram::{fit_ngram, kenlm_score};
use crate::pipeline::{select_topk, OrderingConfig, OrderingStrategy};
use crate::regressor::{predict_scores, train_regressor, FeatureExtractor, RegressorConfig};
use crate::tinylm::{
    downstream_loss, init_params, sample_gradient, sample_loss, sgd_step, Gradient, ModelConfig,
    ModelParams,
};

/// Settings for one training run. `seed` drives parameter initialization
/// (it overrides the model config's seed field).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.5,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        self.model.validate()
    }
}

/// Sequential minibatch SGD over the corpus in its given order, with no
/// reshuffling between batches. Returns the final parameters and the
/// pre-step loss of every batch across all epochs.
pub fn train_lm(corpus: &Corpus, cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model
    };
    let mut params = init_params(&model_cfg)?;
    let mut curve = Vec::new();
    let mut batch_index = 0usize;
    for _ in 0..cfg.epochs {
        for chunk in corpus.samples().chunks(cfg.batch_size) {
            let results: Vec<(f64, Gradient)> = chunk
                .par_iter()
                .map(|s| {
                    let loss = sample_loss(&params, &s.tokens)?;
                    let grad = sample_gradient(&params, &s.tokens)?;
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / chunk.len() as f64;
            let mut mean_loss = 0.0;
            let mut mean_grad = vec![0.0; params.theta.len()];
            for (loss, grad) in &results {
                mean_loss += inv * loss;
                for (acc, g) in mean_grad.iter_mut().zip(&grad.vec) {
                    *acc += inv * g;
                }
            }
            if !mean_loss.is_finite() || mean_grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    phase: "train".into(),
                    step: batch_index,
                });
            }
            curve.push(mean_loss);
            params = sgd_step(&params, &Gradient { vec: mean_grad }, cfg.learning_rate)?;
            batch_index += 1;
        }
    }
    Ok((params, curve))
}

/// Mean per-sample cross-entropy on the held-out corpus; lower is better.
pub fn evaluate(params: &ModelParams, eval: &Corpus) -> Result<f64> {
    downstream_loss(params, eval)
}

/// Deterministic seed mixing so per-cell randomness is decorrelated from
/// both the base seed and the run seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform subsample without replacement, preserving original relative
/// order. Returns the whole corpus when `size >= len`.
pub fn sample_proxy(corpus: &Corpus, size: usize, seed: u64) -> Result<Corpus> {
    let n = corpus.len();
    if size >= n {
        return corpus.subset(
            &(0..n).collect::<Vec<_>>(),
            format!("{}; proxy = full corpus", corpus.provenance()),
        );
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in 0..size {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..size].to_vec();
    chosen.sort_unstable();
    corpus.subset(
        &chosen,
        format!(
            "{}; proxy of {size} samples (seed {seed})",
            corpus.provenance()
        ),
    )
}

/// Which scoring method drives selection and ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    /// N-gram perplexity difficulty proxy (higher score = easier).
    Kenlm { order: usize, smoothing: f64 },
    /// Gradient-alignment quality scores from a uniform-weight trajectory.
    Pds,
    /// Full learnability-quality annotation weights.
    Lqs,
    /// Scores read from an existing score file.
    ExternalFile { path: PathBuf },
}

/// Gradient-alignment-only scoring: trajectory under uniform weights, then
/// per-sample cosine consistency with the backward target vectors.
fn alignment_scores(
    proxy: &Corpus,
    eval: &Corpus,
    cfg: &AnnotationConfig,
) -> Result<(ScoreVector, ModelParams)> {
    let model_cfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model
    };
    let theta0 = init_params(&model_cfg)?;
    let uniform = ScoreVector::uniform(proxy);
    let traj = forward_trajectory(&theta0, proxy, &uniform, cfg.steps, cfg.eta)?;
    let targets = reverse_target_vectors(&traj, proxy, &uniform, eval)?;
    let scores = quality_scores(&traj, &targets, proxy)?;
    Ok((scores, traj.last().clone()))
}

/// Produces a score vector covering the whole corpus. Gradient-based
/// scorers annotate a proxy subsample and, when the proxy is smaller than
/// the corpus, generalize with the embedding-feature regressor.
pub fn score_corpus(
    corpus: &Corpus,
    eval: &Corpus,
    scorer: &Scorer,
    annotation: &AnnotationConfig,
    regressor: &RegressorConfig,
    run_seed: u64,
) -> Result<ScoreVector> {
    match scorer {
        Scorer::Kenlm { order, smoothing } => {
            let model = fit_ngram(corpus, *order, *smoothing)?;
            kenlm_score(corpus, &model)
        }
        Scorer::ExternalFile { path } => {
            let scores = read_scores(path)?;
            scores.covers(corpus)?;
            Ok(scores)
        }
        Scorer::Pds | Scorer::Lqs => {
            let cfg = AnnotationConfig {
                seed: derive_seed(annotation.seed, run_seed),
                ..annotation.clone()
            };
            let proxy = sample_proxy(corpus, cfg.proxy_size, derive_seed(cfg.seed, 0x70726f78))?;
            let (proxy_scores, final_params) = match scorer {
                Scorer::Lqs => {
                    let result = annotate_proxy(&proxy, eval, &cfg)?;
                    (result.gamma_star, result.final_params)
                }
                _ => alignment_scores(&proxy, eval, &cfg)?,
            };
            if proxy.len() == corpus.len() {
                return Ok(proxy_scores);
            }
            let extractor = FeatureExtractor::from_params(&final_params);
            let reg_cfg = RegressorConfig {
                seed: derive_seed(regressor.seed, run_seed),
                ..regressor.clone()
            };
            let model = train_regressor(&proxy, &proxy_scores, &extractor, &reg_cfg)?;
            predict_scores(&model, corpus)
        }
    }
}

/// Full experiment description; everything a run needs, in one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub corpus_path: PathBuf,
    pub eval_path: PathBuf,
    pub scorer: Scorer,
    pub selection_ratio: Option<f64>,
    pub orderings: Vec<OrderingConfig>,
    pub seeds: Vec<u64>,
    pub annotation: AnnotationConfig,
    pub regressor: RegressorConfig,
    /// Per-run training settings; the seed field is replaced by each run
    /// seed.
    pub train: TrainConfig,
    pub max_tokens: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.orderings.is_empty() {
            return Err(Error::config("at least one ordering is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        for o in &self.orderings {
            o.validate()?;
        }
        if let Some(r) = self.selection_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!(
                    "selection ratio must be in (0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// One (ordering, seed) measurement.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub ordering: String,
    pub seed: u64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
    /// In-memory diagnostic only; never serialized, to keep artifacts
    /// reproducible.
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct CellFailure {
    pub ordering: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
pub struct OrderingSummary {
    pub ordering: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl ExperimentReport {
    /// Mean and sample standard deviation per ordering, in first-appearance
    /// order.
    pub fn summaries(&self) -> Vec<OrderingSummary> {
        let mut labels: Vec<String> = Vec::new();
        for row in &self.rows {
            if !labels.contains(&row.ordering) {
                labels.push(row.ordering.clone());
            }
        }
        labels
            .into_iter()
            .map(|label| {
                let losses: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.ordering == label)
                    .map(|r| r.final_loss)
                    .collect();
                let n = losses.len();
                let mean = losses.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                        / (n - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                OrderingSummary {
                    ordering: label,
                    n,
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn loss_for(&self, ordering: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.ordering == ordering && r.seed == seed)
            .map(|r| r.final_loss)
    }

    /// For each ordered pair (a, b): the number of seeds where a's loss is
    /// strictly below b's.
    pub fn win_counts(&self) -> Vec<(String, String, usize)> {
        let summaries = self.summaries();
        let mut out = Vec::new();
        for a in &summaries {
            for b in &summaries {
                if a.ordering == b.ordering {
                    continue;
                }
                let wins = self
                    .rows
                    .iter()
                    .filter(|r| r.ordering == a.ordering)
                    .filter(|r| {
                        self.loss_for(&b.ordering, r.seed)
                            .map(|other| r.final_loss < other)
                            .unwrap_or(false)
                    })
                    .count();
                out.push((a.ordering.clone(), b.ordering.clone(), wins));
            }
        }
        out
    }
}

fn apply_ordering(
    base: &Corpus,
    scores: &ScoreVector,
    ordering: &OrderingConfig,
    run_seed: u64,
) -> Result<Corpus> {
    match ordering.strategy {
        OrderingStrategy::Shuffle => Ok(crate::pipeline::order_shuffle(
            base,
            derive_seed(ordering.seed, run_seed),
        )),
        OrderingStrategy::SortAscending => crate::pipeline::order_sort(base, scores, true),
        OrderingStrategy::SortDescending => crate::pipeline::order_sort(base, scores, false),
        OrderingStrategy::Fold => {
            crate::pipeline::order_fold(base, scores, ordering.layers, ordering.offset_order)
        }
    }
}

/// Runs the full grid: per seed, score the corpus, optionally select, apply
/// each ordering, train, and evaluate. Failed cells are recorded with
/// their (ordering, seed) labels; completed rows are always preserved.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let tok = Tokenizer::with_max_tokens(spec.max_tokens);
    let corpus = load_jsonl(&spec.corpus_path, &tok)?;
    let eval = load_jsonl(&spec.eval_path, &tok)?;
    let mut report = ExperimentReport::default();

    for &seed in &spec.seeds {
        let scores = match score_corpus(
            &corpus,
            &eval,
            &spec.scorer,
            &spec.annotation,
            &spec.regressor,
            seed,
        ) {
            Ok(s) => s,
            Err(e) => {
                report.failures.push(CellFailure {
                    ordering: "(scoring)".into(),
                    seed,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let base = match spec.selection_ratio {
            Some(r) => match select_topk(&corpus, &scores, r) {
                Ok(c) => c,
                Err(e) => {
                    report.failures.push(CellFailure {
                        ordering: "(selection)".into(),
                        seed,
                        error: e.to_string(),
                    });
                    continue;
                }
            },
            None => corpus.clone(),
        };
        for ordering in &spec.orderings {
            let label = ordering.label();
            let started = Instant::now();
            let cell = apply_ordering(&base, &scores, ordering, seed).and_then(|ordered| {
                let cfg = TrainConfig {
                    seed,
                    ..spec.train.clone()
                };
                let (params, curve) = train_lm(&ordered, &cfg)?;
                let final_loss = evaluate(&params, &eval)?;
                Ok((final_loss, curve))
            });
            match cell {
                Ok((final_loss, curve)) => report.rows.push(ExperimentRow {
                    ordering: label,
                    seed,
                    final_loss,
                    curve,
                    wall_secs: started.elapsed().as_secs_f64(),
                }),
                Err(e) => report.failures.push(CellFailure {
                    ordering: label,
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok(report)
}

/// Writes `report.csv` (one row per cell, loss curve joined by `;`) and
/// `summary.txt` (mean +- std per ordering plus pairwise win counts) into
/// `dir`, creating it if needed. Output bytes depend only on the report
/// rows.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::domain("cannot write an empty report"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join("report.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ordering,seed,final_loss,curve").map_err(|e| Error::io(&csv_path, e))?;
    for row in &report.rows {
        let curve: Vec<String> = row.curve.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{},{},{},{}",
            row.ordering,
            row.seed,
            row.final_loss,
            curve.join(";")
        )
        .map_err(|e| Error::io(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let txt_path = dir.join("summary.txt");
    let file = File::create(&txt_path).map_err(|e| Error::io(&txt_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{:<24} {:>4} {:>12} {:>12}", "ordering", "n", "mean", "std")
        .map_err(|e| Error::io(&txt_path, e))?;
    for s in report.summaries() {
        writeln!(
            w,
            "{:<24} {:>4} {:>12.6} {:>12.6}",
            s.ordering, s.n, s.mean, s.std
        )
        .map_err(|e| Error::io(&txt_path, e))?;
    }
    writeln!(w).map_err(|e| Error::io(&txt_path, e))?;
    writeln!(w, "pairwise wins (lower loss):").map_err(|e| Error::io(&txt_path, e))?;
    for (a, b, wins) in report.win_counts() {
        writeln!(w, "  {a} beats {b} in {wins} seeds").map_err(|e| Error::io(&txt_path, e))?;
    }
    if !report.failures.is_empty() {
        writeln!(w).map_err(|e| Error::io(&txt_path, e))?;
        writeln!(w, "failures:").map_err(|e| Error::io(&txt_path, e))?;
        for f in &report.failures {
            writeln!(w, "  ({}, seed {}): {}", f.ordering, f.seed, f.error)
                .map_err(|e| Error::io(&txt_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&txt_path, e))
}

/// Content-addressed run directory name derived from the spec JSON.
pub fn run_dir_name(spec: &ExperimentSpec) -> Result<String> {
    let json = serde_json::to_string(spec).map_err(|e| Error::domain(e.to_string()))?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in json.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("run-{hash:016x}"))
}

/// Runs the experiment and writes its spec echo plus report files into
/// `base/run-<content hash>/`. Returns the report and the run directory.
pub fn run_experiment_to_dir(
    spec: &ExperimentSpec,
    base: &Path,
) -> Result<(ExperimentReport, PathBuf)> {
    let dir = base.join(run_dir_name(spec)?);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let spec_path = dir.join("spec.json");
    let file = File::create(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, spec).map_err(|e| Error::Format {
        path: spec_path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(|e| Error::io(&spec_path, e))?;
    let report = run_experiment(spec)?;
    write_report(&report, &dir)?;
    Ok((report, dir))
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    assert!(wins <= n, "wins must not exceed n");
    let mut total = 0.0;
    for k in wins..=n {
        // binomial coefficient in f64; exact for the small n used here
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        total += c;
    }
    total / 2.0f64.powi(n as i32)
}
