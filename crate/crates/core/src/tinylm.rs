//! A small next-token language model over a flat parameter vector.
//!
//! Architecture: each position embeds its previous `c` tokens (left-padded
//! with BOS), concatenates them, passes through one tanh hidden layer, and
//! projects to vocabulary logits. Per-sample loss defaults to the
//! token-mean cross-entropy over all predictable positions, so gradient
//! norms compare training dynamics rather than sequence lengths.
//!
//! Gradients are exact reverse-mode derivatives computed by hand;
//! Hessian-vector products use central finite differences of the batch
//! gradient, which is all the reverse annotation loop ever needs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, ScoreVector, BOS, VOCAB_SIZE};
use crate::error::{Error, Result};

/// How per-sample loss aggregates over token positions. The mean removes
/// length bias from gradient norms, so norm-ratio scores compare training
/// dynamics rather than sequence lengths; the sum is exposed for anyone
/// who wants length-weighted losses instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    TokenMean,
    TokenSum,
}

/// Model dimensions plus the initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of previous tokens fed to each prediction.
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss_reduction: LossReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_window: 8,
            embed_dim: 16,
            hidden_dim: 32,
            vocab_size: VOCAB_SIZE,
            seed: 0,
            loss_reduction: LossReduction::TokenMean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_window < 1 || self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(Error::config("model dimensions must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab size must be >= 2"));
        }
        Ok(())
    }

    /// Total parameter count:
    /// `V*d` embeddings, `(c*d)*h + h` hidden layer, `h*V + V` output layer.
    pub fn param_count(&self) -> usize {
        let (c, d, h, v) = (
            self.context_window,
            self.embed_dim,
            self.hidden_dim,
            self.vocab_size,
        );
        v * d + c * d * h + h + h * v + v
    }
}

/// Offsets of each parameter block within the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    c: usize,
    d: usize,
    h: usize,
    v: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    n: usize,
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Layout {
        let (c, d, h, v) = (
            cfg.context_window,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.vocab_size,
        );
        let w1 = v * d;
        let b1 = w1 + c * d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        let n = b2 + v;
        Layout { c, d, h, v, w1, b1, w2, b2, n }
    }
}

/// Flat parameter vector paired with the config that shapes it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub config: ModelConfig,
}

/// Gradient of a scalar loss with respect to the full parameter vector.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub vec: Vec<f64>,
}

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient { vec: vec![0.0; n] }
    }

    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.vec.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.vec.iter().all(|x| x.is_finite())
    }
}

/// Deterministic initialization: each block is drawn uniformly with zero
/// mean and standard deviation `1/sqrt(fan_in)`. Embedding rows use fan-in
/// 1 (one active input per lookup); the hidden layer sees `c*d` inputs and
/// the output layer `h`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let lay = Layout::of(config);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut theta = vec![0.0; lay.n];
    let spans = [
        (0, lay.w1, 1.0),
        (lay.w1, lay.w2, (lay.c * lay.d) as f64), // w1 and b1
        (lay.w2, lay.n, lay.h as f64),            // w2 and b2
    ];
    for &(start, end, fan_in) in &spans {
        let bound = (3.0f64).sqrt() / fan_in.sqrt();
        for slot in &mut theta[start..end] {
            *slot = rng.random_range(-bound..bound);
        }
    }
    Ok(ModelParams {
        theta,
        config: *config,
    })
}

fn check_tokens(tokens: &[u16], vocab: usize) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateSample { id: None });
    }
    for &t in tokens {
        if (t as usize) >= vocab {
            return Err(Error::domain(format!(
                "token id {t} out of range for vocab {vocab}"
            )));
        }
    }
    Ok(())
}

/// Forward pass state for one position, reused by loss and gradient.
struct PositionBuffers {
    x: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dz: Vec<f64>,
    dx: Vec<f64>,
}

impl PositionBuffers {
    fn new(lay: &Layout) -> Self {
        PositionBuffers {
            x: vec![0.0; lay.c * lay.d],
            z: vec![0.0; lay.h],
            logits: vec![0.0; lay.v],
            probs: vec![0.0; lay.v],
            dz: vec![0.0; lay.h],
            dx: vec![0.0; lay.c * lay.d],
        }
    }
}

/// Token feeding window slot `w` when predicting position `pos`.
#[inline]
fn context_token(tokens: &[u16], pos: usize, w: usize, c: usize) -> u16 {
    // Window covers positions pos-c .. pos-1; out-of-range slots read BOS.
    if pos + w < c {
        BOS
    } else {
        tokens[pos + w - c]
    }
}

fn forward_position(
    theta: &[f64],
    lay: &Layout,
    tokens: &[u16],
    pos: usize,
    buf: &mut PositionBuffers,
) -> f64 {
    let (c, d, h, v) = (lay.c, lay.d, lay.h, lay.v);
    for w in 0..c {
        let tok = context_token(tokens, pos, w, c) as usize;
        buf.x[w * d..(w + 1) * d].copy_from_slice(&theta[tok * d..(tok + 1) * d]);
    }
    let w1 = &theta[lay.w1..lay.b1];
    let b1 = &theta[lay.b1..lay.w2];
    buf.z.copy_from_slice(b1);
    for (i, &xi) in buf.x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w1[i * h..(i + 1) * h];
        for (zj, &wij) in buf.z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
    for zj in buf.z.iter_mut() {
        *zj = zj.tanh();
    }
    let w2 = &theta[lay.w2..lay.b2];
    let b2 = &theta[lay.b2..lay.b2 + v];
    buf.logits.copy_from_slice(b2);
    for (k, &zk) in buf.z.iter().enumerate() {
        if zk == 0.0 {
            continue;
        }
        let row = &w2[k * v..(k + 1) * v];
        for (lt, &wkt) in buf.logits.iter_mut().zip(row) {
            *lt += zk * wkt;
        }
    }
    let target = tokens[pos] as usize;
    let max = buf.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (pt, &lt) in buf.probs.iter_mut().zip(buf.logits.iter()) {
        *pt = (lt - max).exp();
        sum += *pt;
    }
    let lse = max + sum.ln();
    for pt in buf.probs.iter_mut() {
        *pt /= sum;
    }
    lse - buf.logits[target]
}

fn reduction_scale(config: &ModelConfig, n_positions: usize) -> f64 {
    match config.loss_reduction {
        LossReduction::TokenMean => 1.0 / n_positions as f64,
        LossReduction::TokenSum => 1.0,
    }
}

/// Next-token cross-entropy over all predictable positions, token-mean by
/// default (see [`LossReduction`]).
pub fn sample_loss(params: &ModelParams, tokens: &[u16]) -> Result<f64> {
    check_tokens(tokens, params.config.vocab_size)?;
    let lay = Layout::of(&params.config);
    let mut buf = PositionBuffers::new(&lay);
    let mut total = 0.0;
    for pos in 1..tokens.len() {
        total += forward_position(&params.theta, &lay, tokens, pos, &mut buf);
    }
    Ok(total * reduction_scale(&params.config, tokens.len() - 1))
}

/// Exact reverse-mode gradient of [`sample_loss`] with respect to theta.
pub fn sample_gradient(params: &ModelParams, tokens: &[u16]) -> Result<Gradient> {
    check_tokens(tokens, params.config.vocab_size)?;
    let lay = Layout::of(&params.config);
    let (c, d, h, v) = (lay.c, lay.d, lay.h, lay.v);
    let theta = &params.theta;
    let mut grad = vec![0.0; lay.n];
    let mut buf = PositionBuffers::new(&lay);
    let scale = reduction_scale(&params.config, tokens.len() - 1);

    for pos in 1..tokens.len() {
        forward_position(theta, &lay, tokens, pos, &mut buf);
        let target = tokens[pos] as usize;

        // d(loss)/d(logit_t) = (prob_t - [t == target]) * scale
        buf.probs[target] -= 1.0;
        for p in buf.probs.iter_mut() {
            *p *= scale;
        }

        let (g_head, g_out) = grad.split_at_mut(lay.b2);
        let g_b2 = &mut g_out[..v];
        for (gb, &dl) in g_b2.iter_mut().zip(buf.probs.iter()) {
            *gb += dl;
        }
        let w2 = &theta[lay.w2..lay.b2];
        let g_w2 = &mut g_head[lay.w2..lay.b2];
        for k in 0..h {
            let zk = buf.z[k];
            let row = &w2[k * v..(k + 1) * v];
            let g_row = &mut g_w2[k * v..(k + 1) * v];
            let mut acc = 0.0;
            for t in 0..v {
                let dl = buf.probs[t];
                g_row[t] += zk * dl;
                acc += row[t] * dl;
            }
            buf.dz[k] = acc;
        }

        // tanh backward
        for k in 0..h {
            buf.dz[k] *= 1.0 - buf.z[k] * buf.z[k];
        }

        let g_b1 = &mut grad[lay.b1..lay.w2];
        for (gb, &dp) in g_b1.iter_mut().zip(buf.dz.iter()) {
            *gb += dp;
        }
        let w1 = &theta[lay.w1..lay.b1];
        let g_w1 = &mut grad[lay.w1..lay.b1];
        for i in 0..c * d {
            let xi = buf.x[i];
            let row = &w1[i * h..(i + 1) * h];
            let g_row = &mut g_w1[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for k in 0..h {
                let dp = buf.dz[k];
                g_row[k] += xi * dp;
                acc += row[k] * dp;
            }
            buf.dx[i] = acc;
        }

        for w in 0..c {
            let tok = context_token(tokens, pos, w, c) as usize;
            let g_emb = &mut grad[tok * d..(tok + 1) * d];
            for (ge, &dxi) in g_emb.iter_mut().zip(&buf.dx[w * d..(w + 1) * d]) {
                *ge += dxi;
            }
        }
    }

    Ok(Gradient { vec: grad })
}

fn check_weights(corpus: &Corpus, weights: &ScoreVector) -> Result<()> {
    weights.covers(corpus)?;
    for s in corpus.samples() {
        let w = weights.get(&s.id).expect("covered");
        if w < 0.0 {
            return Err(Error::NegativeWeight {
                id: s.id.clone(),
                value: w,
            });
        }
    }
    Ok(())
}

fn per_sample<T: Send>(
    corpus: &Corpus,
    f: impl Fn(&Sample) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    corpus
        .samples()
        .par_iter()
        .map(|s| {
            f(s).map_err(|e| match e {
                Error::DegenerateSample { id: None } => Error::DegenerateSample {
                    id: Some(s.id.clone()),
                },
                other => other,
            })
        })
        .collect()
}

/// Weighted sum of per-sample losses. Reduction runs in id-sorted order so
/// the result is invariant under corpus permutation.
pub fn weighted_batch_loss(
    params: &ModelParams,
    corpus: &Corpus,
    weights: &ScoreVector,
) -> Result<f64> {
    check_weights(corpus, weights)?;
    let losses = per_sample(corpus, |s| sample_loss(params, &s.tokens))?;
    let mut total = 0.0;
    for &i in corpus.id_sorted_indices() {
        let w = weights.get(&corpus.get(i).id).expect("covered");
        total += w * losses[i];
    }
    Ok(total)
}

/// Per-sample gradients in corpus order, evaluated concurrently.
pub fn per_sample_gradients(params: &ModelParams, corpus: &Corpus) -> Result<Vec<Gradient>> {
    per_sample(corpus, |s| sample_gradient(params, &s.tokens))
}

/// Weighted sum of precomputed per-sample gradients, reduced in id-sorted
/// order. `grads` must be in corpus order.
pub fn weighted_gradient_sum(
    corpus: &Corpus,
    weights: &ScoreVector,
    grads: &[Gradient],
) -> Result<Vec<f64>> {
    check_weights(corpus, weights)?;
    if grads.len() != corpus.len() {
        return Err(Error::Shape {
            expected: corpus.len(),
            actual: grads.len(),
        });
    }
    let n = grads.first().map(|g| g.vec.len()).unwrap_or(0);
    let mut total = vec![0.0; n];
    for &i in corpus.id_sorted_indices() {
        let w = weights.get(&corpus.get(i).id).expect("covered");
        for (acc, g) in total.iter_mut().zip(&grads[i].vec) {
            *acc += w * g;
        }
    }
    Ok(total)
}

/// Gradient of [`weighted_batch_loss`], id-sorted reduction.
pub fn weighted_batch_gradient(
    params: &ModelParams,
    corpus: &Corpus,
    weights: &ScoreVector,
) -> Result<Gradient> {
    let grads = per_sample_gradients(params, corpus)?;
    let total = weighted_gradient_sum(corpus, weights, &grads)?;
    Ok(Gradient { vec: total })
}

/// Unweighted mean of per-sample losses over an evaluation corpus.
pub fn downstream_loss(params: &ModelParams, eval: &Corpus) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    let losses = per_sample(eval, |s| sample_loss(params, &s.tokens))?;
    let mut total = 0.0;
    for &i in eval.id_sorted_indices() {
        total += losses[i];
    }
    Ok(total / eval.len() as f64)
}

/// Gradient of [`downstream_loss`]: mean of per-sample gradients.
pub fn downstream_gradient(params: &ModelParams, eval: &Corpus) -> Result<Gradient> {
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    let grads = per_sample(eval, |s| sample_gradient(params, &s.tokens))?;
    let inv = 1.0 / eval.len() as f64;
    let mut total = vec![0.0; params.theta.len()];
    for &i in eval.id_sorted_indices() {
        for (acc, g) in total.iter_mut().zip(&grads[i].vec) {
            *acc += inv * g;
        }
    }
    Ok(Gradient { vec: total })
}

/// One plain gradient-descent step: `theta' = theta - eta * g`.
pub fn sgd_step(params: &ModelParams, g: &Gradient, eta: f64) -> Result<ModelParams> {
    if g.vec.len() != params.theta.len() {
        return Err(Error::Shape {
            expected: params.theta.len(),
            actual: g.vec.len(),
        });
    }
    if eta.is_nan() || eta < 0.0 {
        return Err(Error::domain(format!("learning rate must be >= 0, got {eta}")));
    }
    let theta = params
        .theta
        .iter()
        .zip(&g.vec)
        .map(|(t, g)| t - eta * g)
        .collect();
    Ok(ModelParams {
        theta,
        config: params.config,
    })
}

/// Central finite difference of an arbitrary gradient oracle along `v`,
/// approximating the Hessian-vector product `H v`.
///
/// The direction is normalized so the probe step has a controlled length:
/// with `s = ||v||` and `u = v/s`, the probe is `theta +- eps*u` and the
/// difference quotient is rescaled by `s`. Returns the zero vector when
/// `||v|| = 0`.
pub fn hvp_of_gradient(
    grad_fn: impl Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(Error::Shape {
            expected: theta.len(),
            actual: v.len(),
        });
    }
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if s == 0.0 {
        return Ok(vec![0.0; theta.len()]);
    }
    let inf_norm = theta.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let eps = 1e-3 * (1.0 + inf_norm);
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    for i in 0..theta.len() {
        let step = eps * v[i] / s;
        plus[i] += step;
        minus[i] -= step;
    }
    let g_plus = grad_fn(&plus)?;
    let g_minus = grad_fn(&minus)?;
    let scale = s / (2.0 * eps);
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) * scale)
        .collect())
}

/// Hessian-vector product of the weighted batch loss at `params`, by
/// central finite differences of [`weighted_batch_gradient`].
pub fn hvp(
    params: &ModelParams,
    corpus: &Corpus,
    weights: &ScoreVector,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_weights(corpus, weights)?;
    let config = params.config;
    hvp_of_gradient(
        |theta| {
            let probe = ModelParams {
                theta: theta.to_vec(),
                config,
            };
            weighted_batch_gradient(&probe, corpus, weights).map(|g| g.vec)
        },
        &params.theta,
        v,
    )
}

const CHECKPOINT_FORMAT: &str = "tinylm-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    theta: Vec<f64>,
}

/// Writes a versioned JSON checkpoint (config + flat parameter vector).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let doc = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config,
        theta: params.theta.clone(),
    };
    serde_json::to_writer(&mut w, &doc).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the format
/// tag and the parameter count.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: CheckpointFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported checkpoint format {:?}", doc.format),
        });
    }
    if doc.theta.len() != doc.config.param_count() {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!(
                "parameter count {} does not match config ({})",
                doc.theta.len(),
                doc.config.param_count()
            ),
        });
    }
    Ok(ModelParams {
        theta: doc.theta,
        config: doc.config,
    })
}
