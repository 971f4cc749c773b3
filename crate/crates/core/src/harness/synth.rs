//! Synthetic desk-scale corpora: clean patterned English-like text with an
//! optional fraction of injected noise samples (filler-character runs and
//! random printable gibberish), so experiments need no external downloads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{Corpus, Sample, Tokenizer};
use crate::error::Result;

const SIMPLE_WORDS: &[&str] = &[
    "the", "cat", "sat", "on", "a", "mat", "dog", "ran", "to", "big", "red", "box",
];
const RICH_WORDS: &[&str] = &[
    "energy", "flows", "through", "the", "system", "while", "models", "learn", "from", "data",
    "and", "theory", "explains", "measured", "signals", "over", "time",
];
const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub samples: usize,
    /// Fraction of samples replaced by noise, in [0, 1].
    pub noise_fraction: f64,
    pub seed: u64,
    /// Words per clean sample; total text stays modest so per-sample
    /// gradients are cheap.
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 100,
            noise_fraction: 0.0,
            seed: 0,
            min_words: 10,
            max_words: 18,
        }
    }
}

fn clean_text(rng: &mut ChaCha20Rng, style: usize, min_words: usize, max_words: usize) -> String {
    let bank: &[&str] = match style {
        0 => SIMPLE_WORDS,
        1 => RICH_WORDS,
        _ => NUMBER_WORDS,
    };
    let n_words = rng.random_range(min_words..=max_words);
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(bank[rng.random_range(0..bank.len())]);
    }
    let mut text = words.join(" ");
    text.push('.');
    text
}

fn noise_text(rng: &mut ChaCha20Rng, len: usize) -> String {
    if rng.random_range(0..2) == 0 {
        // filler runs broken by occasional spaces
        (0..len)
            .map(|_| {
                if rng.random_range(0..12) == 0 {
                    ' '
                } else {
                    'X'
                }
            })
            .collect()
    } else {
        // random printable gibberish
        (0..len)
            .map(|_| rng.random_range(33u8..=126) as char)
            .collect()
    }
}

/// Generates a corpus of clean samples with `noise_fraction` of them
/// replaced by noise. Ids carry a `clean-` / `noise-` prefix so tests can
/// recover the ground truth.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let tok = Tokenizer::default();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n_noise = (cfg.samples as f64 * cfg.noise_fraction).round() as usize;
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        // deterministic interleaving keeps noise spread evenly through the file
        let is_noise =
            n_noise > 0 && (i * n_noise) / cfg.samples != ((i + 1) * n_noise) / cfg.samples;
        let (id, text) = if is_noise {
            let len = rng.random_range(40..90);
            (format!("noise-{i:04}"), noise_text(&mut rng, len))
        } else {
            let style = rng.random_range(0..3);
            (
                format!("clean-{i:04}"),
                clean_text(&mut rng, style, cfg.min_words, cfg.max_words),
            )
        };
        let tokens = tok.tokenize(&text);
        samples.push(Sample { id, text, tokens });
    }
    Corpus::new(
        samples,
        format!(
            "synthetic: {} samples, noise fraction {}, seed {}",
            cfg.samples, cfg.noise_fraction, cfg.seed
        ),
    )
}

/// Clean-only evaluation corpus drawn from the same text distribution.
pub fn synth_eval(samples: usize, seed: u64) -> Result<Corpus> {
    let tok = Tokenizer::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let built = (0..samples)
        .map(|i| {
            let style = rng.random_range(0..3);
            let text = clean_text(&mut rng, style, 10, 18);
            let tokens = tok.tokenize(&text);
            Sample {
                id: format!("eval-{i:04}"),
                text,
                tokens,
            }
        })
        .collect();
    Corpus::new(
        built,
        format!("synthetic eval: {samples} samples, seed {seed}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            samples: 30,
            noise_fraction: 0.2,
            seed: 5,
            ..Default::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.text, y.text);
        }
    }

    #[test]
    fn noise_fraction_is_respected() {
        let cfg = SynthConfig {
            samples: 200,
            noise_fraction: 0.2,
            seed: 1,
            ..Default::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let noise = corpus
            .samples()
            .iter()
            .filter(|s| s.id.starts_with("noise-"))
            .count();
        assert_eq!(noise, 40);
        assert_eq!(corpus.len(), 200);
    }

    #[test]
    fn eval_corpus_is_clean() {
        let eval = synth_eval(16, 3).unwrap();
        assert_eq!(eval.len(), 16);
        assert!(eval.samples().iter().all(|s| s.id.starts_with("eval-")));
        assert!(eval.samples().iter().all(|s| s.text.ends_with('.')));
    }
}
