//! Proxy data annotation: train the tiny LM for a few weighted steps,
//! propagate the downstream gradient backwards along the trajectory, and
//! score every proxy sample by how consistently its gradients align with
//! that target signal and how fast its gradient norm decays.
//!
//! The produced weights live on the probability simplex and drive both
//! selection and ordering downstream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ScoreVector};
use crate::error::{Error, Result};
use crate::tinylm::{
    self, downstream_gradient, init_params, per_sample_gradients, sgd_step, weighted_gradient_sum,
    Gradient, ModelConfig, ModelParams,
};

/// Guard applied to every norm denominator so zero-gradient samples keep
/// finite scores and degenerate directions count as orthogonal.
pub const EPS_NORM: f64 = 1e-12;

/// Checkpoints of the weighted forward training loop.
#[derive(Debug, Clone)]
pub struct Trajectory {
    checkpoints: Vec<ModelParams>,
    pub eta: f64,
}

impl Trajectory {
    /// Number of SGD steps taken (checkpoints minus one).
    pub fn steps(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn checkpoint(&self, t: usize) -> &ModelParams {
        &self.checkpoints[t]
    }

    pub fn checkpoints(&self) -> &[ModelParams] {
        &self.checkpoints
    }

    pub fn last(&self) -> &ModelParams {
        self.checkpoints.last().expect("trajectory is non-empty")
    }
}

/// Backward-propagated downstream-gradient signals, one per step t = 1..=T.
#[derive(Debug, Clone)]
pub struct TargetVectors {
    lambdas: Vec<Vec<f64>>,
}

impl TargetVectors {
    /// Target vector at step `t` (1-based, `1 <= t <= steps`).
    pub fn lambda(&self, t: usize) -> &[f64] {
        &self.lambdas[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda_norm(&self, t: usize) -> f64 {
        self.lambda(t).iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Settings for one proxy annotation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationConfig {
    /// Forward-loop step count T.
    pub steps: usize,
    /// Forward-loop learning rate.
    pub eta: f64,
    /// Score-update step size.
    pub alpha: f64,
    /// Number of proxy samples drawn when annotating a larger corpus.
    pub proxy_size: usize,
    pub seed: u64,
    /// Outer passes over (forward, reverse, update, project). The default
    /// single pass follows the annotation procedure as written; more are
    /// exposed for experimentation.
    pub outer_iters: usize,
    pub model: ModelConfig,
    /// Keep per-(step, sample) gradients from the forward loop in memory
    /// and reuse them during scoring. Only sensible for small proxies.
    pub cache_gradients: bool,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            steps: 6,
            eta: 0.5,
            // small enough that the simplex projection stays interior for
            // typical proxy sizes; weight ranks are alpha-independent in
            // that regime, and downstream stages consume only ranks
            alpha: 1e-3,
            proxy_size: 64,
            seed: 0,
            outer_iters: 1,
            model: ModelConfig::default(),
            cache_gradients: false,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::config("annotation needs at least 2 steps"));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::config("eta must be > 0"));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config("alpha must be > 0"));
        }
        if self.outer_iters < 1 {
            return Err(Error::config("outer_iters must be >= 1"));
        }
        if self.proxy_size < 1 {
            return Err(Error::config("proxy_size must be >= 1"));
        }
        self.model.validate()
    }
}

/// Annotation output: simplex-valued weights plus per-sample diagnostics.
#[derive(Debug, Clone)]
pub struct AnnotationResult {
    pub gamma_star: ScoreVector,
    pub learnability: ScoreVector,
    pub quality: ScoreVector,
    /// `||lambda_{t+1}||` for t = 1..T-1: how much signal each step
    /// contributes.
    pub reliability_per_step: Vec<f64>,
    /// Final checkpoint of the last forward loop; its embedding table is
    /// reused as a frozen feature map by the score regressor.
    pub final_params: ModelParams,
    pub config: AnnotationConfig,
}

fn ensure_finite(vec: &[f64], phase: &str, step: usize) -> Result<()> {
    if vec.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase: phase.to_string(),
            step,
        })
    }
}

fn forward_with_cache(
    theta0: &ModelParams,
    proxy: &Corpus,
    gamma: &ScoreVector,
    steps: usize,
    eta: f64,
    cache: bool,
) -> Result<(Trajectory, Option<Vec<Vec<Gradient>>>)> {
    if steps < 2 {
        return Err(Error::config("trajectory needs at least 2 steps"));
    }
    let mut checkpoints = Vec::with_capacity(steps + 1);
    let mut slabs = if cache {
        Some(Vec::with_capacity(steps))
    } else {
        None
    };
    checkpoints.push(theta0.clone());
    for t in 0..steps {
        let current = checkpoints.last().expect("non-empty");
        let grads = per_sample_gradients(current, proxy)?;
        let summed = weighted_gradient_sum(proxy, gamma, &grads)?;
        ensure_finite(&summed, "forward", t)?;
        let next = sgd_step(current, &Gradient { vec: summed }, eta)?;
        if let Some(slabs) = slabs.as_mut() {
            slabs.push(grads);
        }
        checkpoints.push(next);
    }
    Ok((Trajectory { checkpoints, eta }, slabs))
}

/// Runs T full-batch weighted SGD steps from `theta0`, recording every
/// checkpoint.
pub fn forward_trajectory(
    theta0: &ModelParams,
    proxy: &Corpus,
    gamma: &ScoreVector,
    steps: usize,
    eta: f64,
) -> Result<Trajectory> {
    forward_with_cache(theta0, proxy, gamma, steps, eta, false).map(|(traj, _)| traj)
}

/// The backward recursion over an arbitrary trajectory:
/// `lambda_T = gJ(T)`, then
/// `lambda_t = lambda_{t+1} + gJ(t) - eta * hvp(t, lambda_{t+1})`
/// for t = T-1 down to 1.
///
/// `grad_j_at(t)` is evaluated for t = 1..=T and `hvp_at(t, lambda)` for
/// t = 1..=T-1. The HVP callback is skipped entirely when `eta == 0`, so
/// the recursion then reduces exactly to suffix sums of `gJ`.
fn reverse_recursion(
    steps: usize,
    eta: f64,
    mut grad_j_at: impl FnMut(usize) -> Result<Vec<f64>>,
    mut hvp_at: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let mut lambdas: Vec<Vec<f64>> = vec![Vec::new(); steps];
    lambdas[steps - 1] = grad_j_at(steps)?;
    ensure_finite(&lambdas[steps - 1], "reverse", steps)?;
    for t in (1..steps).rev() {
        let gj = grad_j_at(t)?;
        let next = &lambdas[t];
        let mut lam: Vec<f64> = if eta == 0.0 {
            next.iter().zip(&gj).map(|(l, g)| l + g).collect()
        } else {
            let hv = hvp_at(t, next)?;
            next.iter()
                .zip(&gj)
                .zip(&hv)
                .map(|((l, g), h)| l + g - eta * h)
                .collect()
        };
        ensure_finite(&lam, "reverse", t)?;
        std::mem::swap(&mut lambdas[t - 1], &mut lam);
    }
    Ok(lambdas)
}

/// Computes the target vectors for a completed trajectory. `gamma` must be
/// the same weight vector used in the forward loop; `eval` supplies the
/// downstream gradient.
pub fn reverse_target_vectors(
    traj: &Trajectory,
    proxy: &Corpus,
    gamma: &ScoreVector,
    eval: &Corpus,
) -> Result<TargetVectors> {
    gamma.covers(proxy)?;
    let lambdas = reverse_recursion(
        traj.steps(),
        traj.eta,
        |t| downstream_gradient(traj.checkpoint(t), eval).map(|g| g.vec),
        |t, lam| tinylm::hvp(traj.checkpoint(t), proxy, gamma, lam),
    )?;
    Ok(TargetVectors { lambdas })
}

enum Slab<'a> {
    Borrowed(&'a [Gradient]),
    Owned(Vec<Gradient>),
}

impl Slab<'_> {
    fn grads(&self) -> &[Gradient] {
        match self {
            Slab::Borrowed(s) => s,
            Slab::Owned(v) => v,
        }
    }
}

struct RawScores {
    learnability: Vec<f64>,
    quality: Vec<f64>,
    combined: Vec<f64>,
}

/// One rolling pass over t = 1..T-1 accumulating all three score kinds.
/// At most two per-sample gradient slabs are alive at a time; a
/// forward-loop cache is used when available.
fn raw_scores(
    traj: &Trajectory,
    proxy: &Corpus,
    targets: Option<&TargetVectors>,
    cache: Option<&[Vec<Gradient>]>,
) -> Result<RawScores> {
    let steps = traj.steps();
    let n = proxy.len();
    if let Some(tv) = targets {
        if tv.steps() != steps {
            return Err(Error::Shape {
                expected: steps,
                actual: tv.steps(),
            });
        }
    }
    let grads_at = |t: usize| -> Result<Slab<'_>> {
        if let Some(slabs) = cache {
            if t < slabs.len() {
                return Ok(Slab::Borrowed(&slabs[t]));
            }
        }
        per_sample_gradients(traj.checkpoint(t), proxy).map(Slab::Owned)
    };
    let mut learnability = vec![0.0; n];
    let mut quality = vec![0.0; n];
    let mut combined = vec![0.0; n];
    let mut cur = grads_at(1)?;
    for t in 1..steps {
        let next = grads_at(t + 1)?;
        let (lam, lam_norm) = match targets {
            Some(tv) => (Some(tv.lambda(t + 1)), tv.lambda_norm(t + 1)),
            None => (None, 0.0),
        };
        for i in 0..n {
            let g_t = &cur.grads()[i];
            let g_next = &next.grads()[i];
            let norm_t = g_t.norm();
            let norm_next = g_next.norm();
            learnability[i] += norm_t / norm_next.max(EPS_NORM);
            if let Some(lam) = lam {
                let dot = g_t.dot(lam);
                if lam_norm >= EPS_NORM && norm_t >= EPS_NORM {
                    quality[i] += dot / (lam_norm * norm_t);
                }
                combined[i] += dot / norm_next.max(EPS_NORM);
            }
        }
        cur = next;
    }
    Ok(RawScores {
        learnability,
        quality,
        combined,
    })
}

fn to_scores(proxy: &Corpus, values: Vec<f64>) -> Result<ScoreVector> {
    ScoreVector::new(
        proxy
            .samples()
            .iter()
            .zip(values)
            .map(|(s, v)| (s.id.clone(), v))
            .collect(),
    )
}

/// Sum over steps of the gradient-norm decay ratio
/// `||g(x, theta_t)|| / ||g(x, theta_{t+1})||`. Samples whose gradients
/// shrink fast score high; noisy samples with stubborn gradients score low.
pub fn learnability_scores(traj: &Trajectory, proxy: &Corpus) -> Result<ScoreVector> {
    let raw = raw_scores(traj, proxy, None, None)?;
    to_scores(proxy, raw.learnability)
}

/// Sum over steps of the cosine between the sample gradient and the next
/// step's target vector. Degenerate directions contribute zero.
pub fn quality_scores(
    traj: &Trajectory,
    targets: &TargetVectors,
    proxy: &Corpus,
) -> Result<ScoreVector> {
    let raw = raw_scores(traj, proxy, Some(targets), None)?;
    to_scores(proxy, raw.quality)
}

/// Combined learnability-quality score: per step, the target-vector /
/// sample-gradient inner product normalized by the next-step gradient
/// norm. Termwise equal to reliability x quality term x learnability term.
pub fn lqs_scores(
    traj: &Trajectory,
    targets: &TargetVectors,
    proxy: &Corpus,
) -> Result<ScoreVector> {
    let raw = raw_scores(traj, proxy, Some(targets), None)?;
    to_scores(proxy, raw.combined)
}

/// Quality-only baseline: gradient-direction consistency with the target
/// vector, nothing else.
pub fn pds_scores(
    traj: &Trajectory,
    targets: &TargetVectors,
    proxy: &Corpus,
) -> Result<ScoreVector> {
    quality_scores(traj, targets, proxy)
}

/// Largest relative gap, over all (sample, step) pairs, between the
/// combined-score summand and the product
/// reliability x quality-term x learnability-term.
pub fn decomposition_max_error(
    traj: &Trajectory,
    targets: &TargetVectors,
    proxy: &Corpus,
) -> Result<f64> {
    let steps = traj.steps();
    let mut worst = 0.0f64;
    let mut cur = per_sample_gradients(traj.checkpoint(1), proxy)?;
    for t in 1..steps {
        let next = per_sample_gradients(traj.checkpoint(t + 1), proxy)?;
        let lam = targets.lambda(t + 1);
        let lam_norm = targets.lambda_norm(t + 1);
        for g_t in cur.iter().zip(next.iter()) {
            let (g_t, g_next) = g_t;
            let norm_t = g_t.norm();
            let norm_next = g_next.norm();
            let dot = g_t.dot(lam);
            let raw = dot / norm_next.max(EPS_NORM);
            let reliability = lam_norm;
            let quality_term = if lam_norm >= EPS_NORM && norm_t >= EPS_NORM {
                dot / (lam_norm * norm_t)
            } else {
                0.0
            };
            let learn_term = norm_t / norm_next.max(EPS_NORM);
            let product = reliability * quality_term * learn_term;
            let err = (raw - product).abs() / raw.abs().max(product.abs()).max(1.0);
            worst = worst.max(err);
        }
        cur = next;
    }
    Ok(worst)
}

/// Euclidean projection onto the probability simplex by sort-and-threshold.
/// Entries come out nonnegative and summing to one.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    debug_assert!(v.iter().all(|x| x.is_finite()));
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u > candidate {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Full annotation procedure: initialize uniform weights, run the forward
/// loop, the reverse loop, add the combined scores scaled by alpha, and
/// project back onto the simplex. Repeats `outer_iters` times (default 1).
pub fn annotate_proxy(
    proxy: &Corpus,
    eval: &Corpus,
    cfg: &AnnotationConfig,
) -> Result<AnnotationResult> {
    cfg.validate()?;
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    let model_cfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model
    };
    let theta0 = init_params(&model_cfg)?;
    let n = proxy.len();
    let mut gamma_vals = vec![1.0 / n as f64; n];

    let mut last: Option<(Trajectory, TargetVectors, RawScores)> = None;
    for iter in 0..cfg.outer_iters {
        let gamma = to_scores(proxy, gamma_vals.clone())?;
        let (traj, cache) = forward_with_cache(
            &theta0,
            proxy,
            &gamma,
            cfg.steps,
            cfg.eta,
            cfg.cache_gradients,
        )?;
        let targets = reverse_target_vectors(&traj, proxy, &gamma, eval)?;
        let raw = raw_scores(&traj, proxy, Some(&targets), cache.as_deref())?;
        for (g, r) in gamma_vals.iter_mut().zip(&raw.combined) {
            *g += cfg.alpha * r;
        }
        ensure_finite(&gamma_vals, "update", iter)?;
        gamma_vals = project_simplex(&gamma_vals);
        last = Some((traj, targets, raw));
    }

    let (traj, targets, raw) = last.expect("outer_iters >= 1");
    let reliability_per_step = (1..cfg.steps)
        .map(|t| targets.lambda_norm(t + 1))
        .collect();
    Ok(AnnotationResult {
        gamma_star: to_scores(proxy, gamma_vals)?,
        learnability: to_scores(proxy, raw.learnability)?,
        quality: to_scores(proxy, raw.quality)?,
        reliability_per_step,
        final_params: traj.last().clone(),
        config: cfg.clone(),
    })
}

const ANNOTATION_FORMAT: &str = "annotation-v1";

#[derive(Serialize, Deserialize)]
struct AnnotationDocument {
    format: String,
    gamma_star: BTreeMap<String, f64>,
    learnability: BTreeMap<String, f64>,
    quality: BTreeMap<String, f64>,
    reliability_per_step: Vec<f64>,
    config: AnnotationConfig,
}

/// Writes the annotation result as a JSON document: weights, diagnostics,
/// and the config echo.
pub fn save_annotation(result: &AnnotationResult, path: &Path) -> Result<()> {
    let to_map =
        |sv: &ScoreVector| -> BTreeMap<String, f64> { sv.entries().iter().cloned().collect() };
    let doc = AnnotationDocument {
        format: ANNOTATION_FORMAT.into(),
        gamma_star: to_map(&result.gamma_star),
        learnability: to_map(&result.learnability),
        quality: to_map(&result.quality),
        reliability_per_step: result.reliability_per_step.clone(),
        config: result.config.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back the weights from an annotation document.
pub fn load_annotation_scores(path: &Path) -> Result<ScoreVector> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: AnnotationDocument =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    if doc.format != ANNOTATION_FORMAT {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported annotation format {:?}", doc.format),
        });
    }
    ScoreVector::new(doc.gamma_star.into_iter().collect())
}
