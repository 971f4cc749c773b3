//! Add-k smoothed n-gram model used as a difficulty scorer: samples are
//! scored by the negated perplexity of a small model fit on the corpus, so
//! that a larger score always means "easier / keep / train later", matching
//! the convention of every other scorer in the crate.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Corpus, ScoreVector, BOS, VOCAB_SIZE};
use crate::error::{Error, Result};

/// Count-based n-gram model with add-k smoothing.
#[derive(Debug, Clone)]
pub struct NgramModel {
    pub order: usize,
    pub smoothing: f64,
    pub vocab_size: usize,
    /// context tuple (length order-1) -> next token -> count
    counts: HashMap<Vec<u16>, HashMap<u16, u64>>,
    /// context tuple -> total count over all next tokens
    totals: HashMap<Vec<u16>, u64>,
}

impl NgramModel {
    /// A model with zero counts: every next-token probability is the
    /// uniform `k / (k*V) = 1/V`.
    pub fn empty(order: usize, smoothing: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::config("n-gram order must be >= 1"));
        }
        if smoothing.is_nan() || smoothing <= 0.0 {
            return Err(Error::config("smoothing k must be > 0"));
        }
        Ok(NgramModel {
            order,
            smoothing,
            vocab_size: VOCAB_SIZE,
            counts: HashMap::new(),
            totals: HashMap::new(),
        })
    }

    pub fn count(&self, context: &[u16], next: u16) -> u64 {
        self.counts
            .get(context)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Add-k smoothed probability of `next` given `context`.
    pub fn probability(&self, context: &[u16], next: u16) -> f64 {
        let c = self.count(context, next) as f64;
        let total = self.totals.get(context).copied().unwrap_or(0) as f64;
        (c + self.smoothing) / (total + self.smoothing * self.vocab_size as f64)
    }
}

/// Left-pads a token sequence position with BOS to form its context tuple.
fn context_at(tokens: &[u16], pos: usize, len: usize) -> Vec<u16> {
    (0..len)
        .map(|w| {
            if pos + w < len {
                BOS
            } else {
                tokens[pos + w - len]
            }
        })
        .collect()
}

/// Fits counts over all n-grams of every sample. The model is a pure
/// function of the sample multiset: corpus order does not matter.
pub fn fit_ngram(corpus: &Corpus, order: usize, smoothing: f64) -> Result<NgramModel> {
    let mut model = NgramModel::empty(order, smoothing)?;
    let ctx_len = order - 1;
    for s in corpus.samples() {
        for pos in 1..s.tokens.len() {
            let ctx = context_at(&s.tokens, pos, ctx_len);
            *model
                .counts
                .entry(ctx.clone())
                .or_default()
                .entry(s.tokens[pos])
                .or_insert(0) += 1;
            *model.totals.entry(ctx).or_insert(0) += 1;
        }
    }
    Ok(model)
}

/// `exp` of the mean negative log probability over all predictable
/// positions. Always >= 1 for a proper distribution.
pub fn perplexity(model: &NgramModel, tokens: &[u16]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateSample { id: None });
    }
    let ctx_len = model.order - 1;
    let mut log_sum = 0.0;
    for pos in 1..tokens.len() {
        let ctx = context_at(tokens, pos, ctx_len);
        log_sum += model.probability(&ctx, tokens[pos]).ln();
    }
    Ok((-log_sum / (tokens.len() - 1) as f64).exp())
}

/// Scores every sample by negated perplexity under the fitted model, so
/// higher scores mean easier samples.
pub fn kenlm_score(corpus: &Corpus, model: &NgramModel) -> Result<ScoreVector> {
    let scored: Vec<(String, f64)> = corpus
        .samples()
        .par_iter()
        .map(|s| {
            let ppl = perplexity(model, &s.tokens).map_err(|e| match e {
                Error::DegenerateSample { id: None } => Error::DegenerateSample {
                    id: Some(s.id.clone()),
                },
                other => other,
            })?;
            Ok((s.id.clone(), -ppl))
        })
        .collect::<Result<_>>()?;
    ScoreVector::new(scored)
}

/// Writes the count table as text: a header line with the model settings,
/// then one line per (count, next, context...) triple, sorted for
/// reproducibility.
pub fn save_ngram(model: &NgramModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "ngram {} {} {}",
        model.order, model.smoothing, model.vocab_size
    )
    .map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<(Vec<u16>, u16, u64)> = model
        .counts
        .iter()
        .flat_map(|(ctx, nexts)| nexts.iter().map(|(&next, &count)| (ctx.clone(), next, count)))
        .collect();
    lines.sort();
    for (ctx, next, count) in lines {
        let ctx_str: Vec<String> = ctx.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{count} {next} {}", ctx_str.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a count table written by [`save_ngram`].
pub fn load_ngram(path: &Path) -> Result<NgramModel> {
    let bad = |msg: String| Error::Format {
        path: path.display().to_string(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "ngram" {
        return Err(bad(format!("bad header {header:?}")));
    }
    let order: usize = parts[1].parse().map_err(|_| bad("bad order".into()))?;
    let smoothing: f64 = parts[2].parse().map_err(|_| bad("bad smoothing".into()))?;
    let vocab_size: usize = parts[3].parse().map_err(|_| bad("bad vocab".into()))?;
    let mut counts: HashMap<Vec<u16>, HashMap<u16, u64>> = HashMap::new();
    let mut totals: HashMap<Vec<u16>, u64> = HashMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(bad(format!("line {}: too few fields", lineno + 2)));
        }
        let count: u64 = fields[0]
            .parse()
            .map_err(|_| bad(format!("line {}: bad count", lineno + 2)))?;
        let next: u16 = fields[1]
            .parse()
            .map_err(|_| bad(format!("line {}: bad token", lineno + 2)))?;
        let ctx: Vec<u16> = fields[2..]
            .iter()
            .map(|f| f.parse::<u16>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: bad context", lineno + 2)))?;
        if ctx.len() != order - 1 {
            return Err(bad(format!("line {}: context length mismatch", lineno + 2)));
        }
        *counts.entry(ctx.clone()).or_default().entry(next).or_insert(0) += count;
        *totals.entry(ctx).or_insert(0) += count;
    }
    Ok(NgramModel {
        order,
        smoothing,
        vocab_size,
        counts,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sample, Tokenizer};

    fn corpus_of(texts: &[(&str, &str)]) -> Corpus {
        let tok = Tokenizer::default();
        let samples = texts
            .iter()
            .map(|(id, t)| Sample {
                id: id.to_string(),
                text: t.to_string(),
                tokens: tok.tokenize(t),
            })
            .collect();
        Corpus::new(samples, "test").unwrap()
    }

    #[test]
    fn fitting_is_deterministic_and_order_invariant() {
        let corpus = corpus_of(&[("a", "abc"), ("b", "bca"), ("c", "cab")]);
        let permuted = corpus.reordered(&[2, 1, 0], "permuted").unwrap();
        let m1 = fit_ngram(&corpus, 3, 0.1).unwrap();
        let m2 = fit_ngram(&corpus, 3, 0.1).unwrap();
        let m3 = fit_ngram(&permuted, 3, 0.1).unwrap();
        assert_eq!(m1.counts, m2.counts);
        assert_eq!(m1.counts, m3.counts);
    }

    #[test]
    fn bigram_counts_match_hand_count() {
        let corpus = corpus_of(&[("x", "AB")]);
        let model = fit_ngram(&corpus, 2, 0.1).unwrap();
        assert_eq!(model.count(&[BOS], 65), 1);
        assert_eq!(model.count(&[65], 66), 1);
        assert_eq!(model.count(&[66], 65), 0);
    }

    #[test]
    fn empty_training_set_gives_uniform_perplexity() {
        let model = NgramModel::empty(3, 0.5).unwrap();
        let tok = Tokenizer::default();
        let ppl = perplexity(&model, &tok.tokenize("zz9")).unwrap();
        assert!(
            (ppl - VOCAB_SIZE as f64).abs() < 1e-9,
            "ppl {ppl} should be vocab size"
        );
        assert!((model.probability(&[BOS, BOS], 65) - 1.0 / 257.0).abs() < 1e-15);
    }

    #[test]
    fn memorized_sequence_has_perplexity_near_one() {
        let texts: Vec<(String, String)> = (0..50)
            .map(|i| (format!("s{i}"), "the cat sat".to_string()))
            .collect();
        let pairs: Vec<(&str, &str)> =
            texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let corpus = corpus_of(&pairs);
        let model = fit_ngram(&corpus, 3, 1e-6).unwrap();
        let tok = Tokenizer::default();
        let ppl = perplexity(&model, &tok.tokenize("the cat sat")).unwrap();
        assert!((ppl - 1.0).abs() < 1e-3, "ppl {ppl}");
    }

    #[test]
    fn perplexity_matches_pencil_and_paper() {
        // Corpus "AA" and "AB" with order 2, k = 0.5.
        // Counts: (BOS -> A): 2, (A -> A): 1, (A -> B): 1.
        let corpus = corpus_of(&[("x", "AA"), ("y", "AB")]);
        let model = fit_ngram(&corpus, 2, 0.5).unwrap();
        // Query "AB": p(A|BOS) = (2+0.5)/(2+0.5*257), p(B|A) = (1+0.5)/(2+0.5*257)
        let denom = 2.0 + 0.5 * 257.0;
        let p1: f64 = 2.5 / denom;
        let p2: f64 = 1.5 / denom;
        let want = (-(p1.ln() + p2.ln()) / 2.0).exp();
        let tok = Tokenizer::default();
        let got = perplexity(&model, &tok.tokenize("AB")).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn probabilities_sum_to_one_over_vocab() {
        let corpus = corpus_of(&[("a", "hello world"), ("b", "hello there")]);
        for k in [0.01, 0.1, 1.0, 7.3] {
            let model = fit_ngram(&corpus, 2, k).unwrap();
            for ctx in [vec![BOS], vec![104u16], vec![255u16]] {
                let sum: f64 = (0..VOCAB_SIZE as u16)
                    .map(|t| model.probability(&ctx, t))
                    .sum();
                assert!((sum - 1.0).abs() < 1e-9, "k={k} ctx={ctx:?} sum={sum}");
            }
        }
    }

    #[test]
    fn score_is_negated_perplexity_and_favors_training_text() {
        let corpus = corpus_of(&[
            ("train1", "the cat sat on the mat"),
            ("train2", "the dog sat on the rug"),
        ]);
        let model = fit_ngram(&corpus, 3, 0.1).unwrap();
        let probe = corpus_of(&[
            ("seen", "the cat sat on the mat"),
            ("noise", "qz@#!j$%kw^&vx*()"),
        ]);
        let scores = kenlm_score(&probe, &model).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(
            scores.get("seen").unwrap() > scores.get("noise").unwrap(),
            "training-like text must outscore noise"
        );
        let ppl_seen = perplexity(&model, &probe.by_id("seen").unwrap().tokens).unwrap();
        assert_eq!(scores.get("seen").unwrap(), -ppl_seen);
    }

    #[test]
    fn identical_samples_get_identical_scores() {
        let corpus = corpus_of(&[("a", "same text"), ("b", "same text")]);
        let model = fit_ngram(&corpus, 2, 0.1).unwrap();
        let scores = kenlm_score(&corpus, &model).unwrap();
        assert_eq!(scores.get("a"), scores.get("b"));
    }

    #[test]
    fn single_sample_corpus_scores_one_entry() {
        let corpus = corpus_of(&[("only", "one sample")]);
        let model = fit_ngram(&corpus, 2, 0.1).unwrap();
        let scores = kenlm_score(&corpus, &model).unwrap();
        assert_eq!(scores.len(), 1);
    }

    #[test]
    fn rank_order_survives_affine_rescaling_of_perplexity() {
        let corpus = corpus_of(&[("a", "aa bb"), ("b", "zq xw"), ("c", "aa aa")]);
        let model = fit_ngram(&corpus, 2, 0.1).unwrap();
        let scores = kenlm_score(&corpus, &model).unwrap();
        let argsort = |vals: &[f64]| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
            idx
        };
        let raw: Vec<f64> = corpus
            .samples()
            .iter()
            .map(|s| scores.get(&s.id).unwrap())
            .collect();
        let rescaled: Vec<f64> = raw.iter().map(|&x| -(3.0 * -x + 11.0)).collect();
        assert_eq!(argsort(&raw), argsort(&rescaled));
    }

    #[test]
    fn count_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.counts");
        let corpus = corpus_of(&[("a", "hello"), ("b", "help")]);
        let model = fit_ngram(&corpus, 3, 0.25).unwrap();
        save_ngram(&model, &path).unwrap();
        let back = load_ngram(&path).unwrap();
        assert_eq!(back.order, 3);
        assert_eq!(back.smoothing, 0.25);
        assert_eq!(back.counts, model.counts);
        assert_eq!(back.totals, model.totals);
    }
}
