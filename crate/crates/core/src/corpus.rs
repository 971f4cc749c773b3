//! Corpus data model: JSONL ingestion, byte-level tokenization, and score
//! persistence.
//!
//! A corpus is an ordered list of samples; iteration order is significant
//! because it *is* the training order after the pipeline reorders it.
//! Reductions elsewhere in the crate iterate samples in id-sorted order so
//! that batch results do not depend on corpus permutation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of distinct token ids: 256 byte values plus one BOS marker.
pub const VOCAB_SIZE: usize = 257;

/// Begin-of-sequence token id.
pub const BOS: u16 = 256;

/// One training document.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u16>,
}

/// Byte-level tokenizer. Every UTF-8 text is representable; token ids are
/// the raw byte values, prefixed with [`BOS`].
#[derive(Debug, Clone, Copy)]
pub struct Tokenizer {
    /// Token sequences are cut to this length at ingestion (BOS included).
    pub max_tokens: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { max_tokens: 512 }
    }
}

impl Tokenizer {
    pub fn with_max_tokens(max_tokens: usize) -> Self {
        Tokenizer { max_tokens }
    }

    /// BOS followed by the byte values of `text`, in order. No truncation.
    pub fn tokenize(&self, text: &str) -> Vec<u16> {
        let mut tokens = Vec::with_capacity(text.len() + 1);
        tokens.push(BOS);
        tokens.extend(text.bytes().map(u16::from));
        tokens
    }

    /// Inverse of [`Tokenizer::tokenize`]: drops BOS markers and reassembles
    /// the remaining byte values.
    pub fn detokenize(&self, tokens: &[u16]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t != BOS)
            .map(|&t| t as u8)
            .collect()
    }
}

/// Ordered, immutable collection of samples with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<Sample>,
    provenance: String,
    by_id: HashMap<String, usize>,
    id_sorted: Vec<usize>,
}

impl Corpus {
    /// Builds a corpus, validating id uniqueness and non-emptiness.
    pub fn new(samples: Vec<Sample>, provenance: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: s.id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut id_sorted: Vec<usize> = (0..samples.len()).collect();
        id_sorted.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
        Ok(Corpus {
            samples,
            provenance: provenance.into(),
            by_id,
            id_sorted,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&Sample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Sample indices in id-sorted order. Batch reductions iterate in this
    /// order so results are invariant under corpus permutation.
    pub fn id_sorted_indices(&self) -> &[usize] {
        &self.id_sorted
    }

    /// New corpus with the same samples in a caller-chosen index order.
    /// `order` must be a permutation of `0..len`.
    pub fn reordered(&self, order: &[usize], provenance: impl Into<String>) -> Result<Corpus> {
        if order.len() != self.samples.len() {
            return Err(Error::Shape {
                expected: self.samples.len(),
                actual: order.len(),
            });
        }
        let samples = order.iter().map(|&i| self.samples[i].clone()).collect();
        Corpus::new(samples, provenance)
    }

    /// New corpus keeping only the samples at `indices`, in the given
    /// order.
    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Corpus> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Corpus::new(samples, provenance)
    }
}

/// Loads a JSONL corpus: one object per line with string fields `id` and
/// `text`; unknown fields are ignored. Token sequences longer than the
/// tokenizer's `max_tokens` are truncated and the truncation is recorded in
/// the corpus provenance.
pub fn load_jsonl(path: &Path, tok: &Tokenizer) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut empty_ids = Vec::new();
    let mut truncated = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno,
                msg: e.to_string(),
            })?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno,
                msg: "missing string field \"id\"".into(),
            })?
            .to_string();
        let text = value
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno,
                msg: "missing string field \"text\"".into(),
            })?
            .to_string();
        if seen.insert(id.clone(), lineno).is_some() {
            return Err(Error::DuplicateId { id, line: lineno });
        }
        if text.is_empty() {
            empty_ids.push(id);
            continue;
        }
        let mut tokens = tok.tokenize(&text);
        if tokens.len() > tok.max_tokens {
            tokens.truncate(tok.max_tokens);
            truncated += 1;
        }
        samples.push(Sample { id, text, tokens });
    }

    if !empty_ids.is_empty() {
        return Err(Error::EmptySamples { ids: empty_ids });
    }

    let mut provenance = format!("loaded {} samples from {}", samples.len(), path.display());
    if truncated > 0 {
        provenance.push_str(&format!(
            "; truncated {truncated} samples to {} tokens",
            tok.max_tokens
        ));
    }
    Corpus::new(samples, provenance)
}

/// Writes the corpus back as JSONL with `id` and `text` fields, in corpus
/// order.
pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in corpus.samples() {
        let line = serde_json::json!({ "id": s.id, "text": s.text });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One real score per sample id. Scores are finite; ids are unique.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    entries: Vec<(String, f64)>,
    by_id: HashMap<String, usize>,
}

impl ScoreVector {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, (id, score)) in entries.iter().enumerate() {
            if !score.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite score {score} for sample {id:?}"
                )));
            }
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(ScoreVector { entries, by_id })
    }

    /// Builds a score vector over `corpus` by applying `f` to each sample.
    pub fn from_fn(corpus: &Corpus, mut f: impl FnMut(&Sample) -> f64) -> Result<Self> {
        let entries = corpus
            .samples()
            .iter()
            .map(|s| (s.id.clone(), f(s)))
            .collect();
        ScoreVector::new(entries)
    }

    /// Uniform weights 1/n over the corpus.
    pub fn uniform(corpus: &Corpus) -> Self {
        let n = corpus.len() as f64;
        ScoreVector::from_fn(corpus, |_| 1.0 / n).expect("uniform scores are finite")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.by_id.get(id).map(|&i| self.entries[i].1)
    }

    /// Checks that every corpus sample has a score entry.
    pub fn covers(&self, corpus: &Corpus) -> Result<()> {
        let missing: Vec<String> = corpus
            .samples()
            .iter()
            .filter(|s| !self.by_id.contains_key(&s.id))
            .map(|s| s.id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::ScoreCoverage { missing })
        }
    }

    /// Scores aligned with corpus order. Fails on coverage gaps.
    pub fn aligned_with(&self, corpus: &Corpus) -> Result<Vec<f64>> {
        self.covers(corpus)?;
        Ok(corpus
            .samples()
            .iter()
            .map(|s| self.get(&s.id).expect("covered"))
            .collect())
    }
}

/// Writes one JSON line per corpus sample, `{"id":..., "score":...}`, in
/// corpus order. Scores round-trip exactly through the decimal encoding.
pub fn write_scores(corpus: &Corpus, scores: &ScoreVector, path: &Path) -> Result<()> {
    scores.covers(corpus)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in corpus.samples() {
        let score = scores.get(&s.id).expect("covered");
        let line = serde_json::json!({ "id": s.id, "score": score });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize, Serialize)]
struct ScoreLine {
    id: String,
    score: f64,
}

/// Reads a score file written by [`write_scores`].
pub fn read_scores(path: &Path) -> Result<ScoreVector> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parsed: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        entries.push((parsed.id, parsed.score));
    }
    ScoreVector::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, text: &str) -> Sample {
        let tok = Tokenizer::default();
        Sample {
            id: id.into(),
            text: text.into(),
            tokens: tok.tokenize(text),
        }
    }

    pub(crate) fn tiny_corpus(texts: &[(&str, &str)]) -> Corpus {
        let samples = texts.iter().map(|(id, t)| sample(id, t)).collect();
        Corpus::new(samples, "test").unwrap()
    }

    #[test]
    fn tokenize_empty_is_bos_only() {
        let tok = Tokenizer::default();
        assert_eq!(tok.tokenize(""), vec![BOS]);
    }

    #[test]
    fn tokenize_ascii_is_byte_identity() {
        let tok = Tokenizer::default();
        assert_eq!(tok.tokenize("AB"), vec![BOS, 65, 66]);
    }

    #[test]
    fn tokenize_round_trips_100_byte_text() {
        let tok = Tokenizer::default();
        let text: String = (0..100).map(|i| ((i % 26) as u8 + b'a') as char).collect();
        let tokens = tok.tokenize(&text);
        assert_eq!(tokens.len(), 101);
        assert_eq!(tok.detokenize(&tokens), text.as_bytes());
    }

    #[test]
    fn load_jsonl_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\",\"text\":\"two\"}\n{\"id\":\"c\",\"text\":\"three\"}\n",
        )
        .unwrap();
        let corpus = load_jsonl(&path, &Tokenizer::default()).unwrap();
        assert_eq!(corpus.len(), 3);
        let ids: Vec<&str> = corpus.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn load_jsonl_rejects_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"a\",\"text\":\"two\"}\n",
        )
        .unwrap();
        let err = load_jsonl(&path, &Tokenizer::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn load_jsonl_reports_line_of_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\"}\n").unwrap();
        let err = load_jsonl(&path, &Tokenizer::default()).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_rejects_empty_text_listing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"\"}\n{\"id\":\"b\",\"text\":\"ok\"}\n{\"id\":\"c\",\"text\":\"\"}\n",
        )
        .unwrap();
        let err = load_jsonl(&path, &Tokenizer::default()).unwrap_err();
        match err {
            Error::EmptySamples { ids } => assert_eq!(ids, vec!["a".to_string(), "c".to_string()]),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_ignores_unknown_fields_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let long_text = "x".repeat(100);
        std::fs::write(
            &path,
            format!("{{\"id\":\"a\",\"text\":\"{long_text}\",\"extra\":42}}\n"),
        )
        .unwrap();
        let tok = Tokenizer::with_max_tokens(11);
        let corpus = load_jsonl(&path, &tok).unwrap();
        assert_eq!(corpus.get(0).tokens.len(), 11);
        assert!(corpus.provenance().contains("truncated 1 samples"));
    }

    #[test]
    fn write_then_load_is_identity_on_ids_texts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = tiny_corpus(&[("z", "last first"), ("a", "escaped \"quote\""), ("m", "√ unicode")]);
        write_jsonl(&corpus, &path).unwrap();
        let back = load_jsonl(&path, &Tokenizer::default()).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (orig, re) in corpus.samples().iter().zip(back.samples()) {
            assert_eq!(orig.id, re.id);
            assert_eq!(orig.text, re.text);
        }
    }

    #[test]
    fn write_scores_in_corpus_order_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let corpus = tiny_corpus(&[("a", "one"), ("b", "two")]);
        let scores =
            ScoreVector::new(vec![("b".into(), -1.0), ("a".into(), 0.5)]).unwrap();
        write_scores(&corpus, &scores, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"a\""));
        assert!(lines[1].contains("\"b\""));
        let back = read_scores(&path).unwrap();
        assert_eq!(back.get("a"), Some(0.5));
        assert_eq!(back.get("b"), Some(-1.0));
    }

    #[test]
    fn write_scores_fails_on_missing_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let corpus = tiny_corpus(&[("a", "one"), ("b", "two")]);
        let scores = ScoreVector::new(vec![("a".into(), 0.5)]).unwrap();
        let err = write_scores(&corpus, &scores, &path).unwrap_err();
        match err {
            Error::ScoreCoverage { missing } => assert_eq!(missing, vec!["b".to_string()]),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tokenize_round_trips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let tok = Tokenizer::default();
            let tokens = tok.tokenize(&text);
            prop_assert_eq!(tokens.len(), text.len() + 1);
            prop_assert_eq!(tok.detokenize(&tokens), text.as_bytes());
        }

        #[test]
        fn tokenize_is_injective(a in ".{0,40}", b in ".{0,40}") {
            let tok = Tokenizer::default();
            if a != b {
                prop_assert_ne!(tok.tokenize(&a), tok.tokenize(&b));
            }
        }

        #[test]
        fn score_file_round_trips_floats(scores in proptest::collection::vec(-1e12f64..1e12, 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            let texts: Vec<(String, String)> = scores
                .iter()
                .enumerate()
                .map(|(i, _)| (format!("s{i}"), format!("text {i}")))
                .collect();
            let pairs: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let corpus = tiny_corpus(&pairs);
            let sv = ScoreVector::new(
                texts.iter().zip(&scores).map(|((id, _), &s)| (id.clone(), s)).collect(),
            ).unwrap();
            write_scores(&corpus, &sv, &path).unwrap();
            let back = read_scores(&path).unwrap();
            for ((id, _), &s) in texts.iter().zip(&scores) {
                prop_assert_eq!(back.get(id), Some(s));
            }
        }
    }
}
