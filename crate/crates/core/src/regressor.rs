//! Score regressor: generalizes annotated proxy weights to the full corpus.
//!
//! Features are mean-pooled token embeddings under a frozen table (taken
//! from the annotation loop's final checkpoint); the head is a plain affine
//! map fit by gradient descent on mean squared error. Among the per-epoch
//! checkpoints, the one with the highest validation rank correlation wins.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, ScoreVector, BOS};
use crate::error::{Error, Result};
use crate::tinylm::ModelParams;

/// Frozen token-embedding table used as the feature map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub table: Vec<f64>,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl FeatureExtractor {
    /// Borrows the embedding block out of a trained model.
    pub fn from_params(params: &ModelParams) -> FeatureExtractor {
        let v = params.config.vocab_size;
        let d = params.config.embed_dim;
        FeatureExtractor {
            table: params.theta[..v * d].to_vec(),
            vocab_size: v,
            embed_dim: d,
        }
    }

    /// Mean of the embedding vectors of all non-BOS tokens.
    pub fn features(&self, sample: &Sample) -> Result<Vec<f64>> {
        let d = self.embed_dim;
        let mut acc = vec![0.0; d];
        let mut count = 0usize;
        for &t in &sample.tokens {
            if t == BOS {
                continue;
            }
            let row = &self.table[t as usize * d..(t as usize + 1) * d];
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateSample {
                id: Some(sample.id.clone()),
            });
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        Ok(acc)
    }
}

/// Affine head over mean-pooled embedding features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorModel {
    pub extractor: FeatureExtractor,
    pub w: Vec<f64>,
    pub b: f64,
    /// Validation rank correlation of the selected checkpoint. `None` when
    /// it was undefined for every epoch (e.g. constant targets).
    pub best_val_spearman: Option<f64>,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub epochs: usize,
    /// Step size; `None` derives a stable one from the feature scale.
    pub learning_rate: Option<f64>,
    /// Drives the stratified train/validation split.
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            epochs: 400,
            learning_rate: None,
            seed: 0,
        }
    }
}

/// Average-rank vector (ties share the mean of their positions).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson correlation of average-rank vectors. Returns
/// `Ok(None)` when either side has zero rank variance (all ties), which
/// callers surface as an undefined / flagged result.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::domain("need at least 2 points for correlation"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite values in correlation input"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (var_a * var_b).sqrt()))
}

/// Stratified 90/10 split: samples are ranked by target score, chunked into
/// contiguous rank bands, and one validation pick is drawn per band.
fn stratified_split(targets: &[f64], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = targets.len();
    let n_val = (n / 10).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]).then(a.cmp(&b)));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut val = Vec::with_capacity(n_val);
    for band in 0..n_val {
        let start = band * n / n_val;
        let end = (band + 1) * n / n_val;
        let pick = rng.random_range(start..end);
        val.push(order[pick]);
    }
    val.sort_unstable();
    let train: Vec<usize> = (0..n).filter(|i| !val.contains(i)).collect();
    (train, val)
}

/// Fits the affine head on 90% of the proxy by full-batch gradient descent
/// on MSE, tracking validation rank correlation each epoch and returning
/// the best checkpoint.
pub fn train_regressor(
    proxy: &Corpus,
    targets: &ScoreVector,
    extractor: &FeatureExtractor,
    cfg: &RegressorConfig,
) -> Result<RegressorModel> {
    if proxy.len() < 10 {
        return Err(Error::InsufficientProxy {
            have: proxy.len(),
            need: 10,
        });
    }
    if cfg.epochs < 1 {
        return Err(Error::config("epochs must be >= 1"));
    }
    let y = targets.aligned_with(proxy)?;
    let features: Vec<Vec<f64>> = proxy
        .samples()
        .iter()
        .map(|s| extractor.features(s))
        .collect::<Result<_>>()?;
    let d = extractor.embed_dim;

    let (train_idx, val_idx) = stratified_split(&y, cfg.seed);
    let lr = match cfg.learning_rate {
        Some(lr) if lr > 0.0 => lr,
        Some(lr) => {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {lr}"
            )))
        }
        None => {
            // Stable for full-batch GD on least squares: the Hessian's
            // largest eigenvalue is bounded by twice the mean squared
            // feature row norm (bias column included).
            let mean_sq: f64 = train_idx
                .iter()
                .map(|&i| features[i].iter().map(|x| x * x).sum::<f64>() + 1.0)
                .sum::<f64>()
                / train_idx.len() as f64;
            0.5 / mean_sq
        }
    };

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;

    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let inv = 1.0 / train_idx.len() as f64;
        for &i in &train_idx {
            let pred: f64 = w.iter().zip(&features[i]).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = pred - y[i];
            for (g, &f) in gw.iter_mut().zip(&features[i]) {
                *g += 2.0 * inv * err * f;
            }
            gb += 2.0 * inv * err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;

        let val_pred: Vec<f64> = val_idx
            .iter()
            .map(|&i| w.iter().zip(&features[i]).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect();
        let val_true: Vec<f64> = val_idx.iter().map(|&i| y[i]).collect();
        let rho = if val_idx.len() >= 2 {
            spearman(&val_pred, &val_true)?
        } else {
            None
        };
        if let Some(r) = rho {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, w.clone(), b));
            }
        }
    }

    // undefined correlation at every epoch (constant-target regime) falls
    // back to the final iterate, flagged with best_val_spearman = None
    let (best_val_spearman, w, b) = match best {
        Some((r, w, b)) => (Some(r), w, b),
        None => (None, w, b),
    };
    Ok(RegressorModel {
        extractor: extractor.clone(),
        w,
        b,
        best_val_spearman,
        epochs_trained: cfg.epochs,
    })
}

/// Mean squared error of the model over a corpus with aligned targets.
pub fn regressor_mse(
    model: &RegressorModel,
    corpus: &Corpus,
    targets: &ScoreVector,
) -> Result<f64> {
    let y = targets.aligned_with(corpus)?;
    let mut total = 0.0;
    for (s, &yi) in corpus.samples().iter().zip(&y) {
        let f = model.extractor.features(s)?;
        let pred: f64 = model.w.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + model.b;
        total += (pred - yi) * (pred - yi);
    }
    Ok(total / corpus.len() as f64)
}

/// Scores every sample as `w . features + b`. Pure per-sample function, so
/// the output is independent of corpus ordering.
pub fn predict_scores(model: &RegressorModel, corpus: &Corpus) -> Result<ScoreVector> {
    let entries: Vec<(String, f64)> = corpus
        .samples()
        .par_iter()
        .map(|s| {
            let f = model.extractor.features(s)?;
            let pred: f64 = model.w.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + model.b;
            Ok((s.id.clone(), pred))
        })
        .collect::<Result<_>>()?;
    ScoreVector::new(entries)
}

const REGRESSOR_FORMAT: &str = "regressor-v1";

#[derive(Serialize, Deserialize)]
struct RegressorFile {
    format: String,
    model: RegressorModel,
}

pub fn save_regressor(model: &RegressorModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let doc = RegressorFile {
        format: REGRESSOR_FORMAT.into(),
        model: model.clone(),
    };
    serde_json::to_writer(&mut w, &doc).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_regressor(path: &Path) -> Result<RegressorModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: RegressorFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    if doc.format != REGRESSOR_FORMAT {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported regressor format {:?}", doc.format),
        });
    }
    Ok(doc.model)
}
