//! Synthetic transcript corpus and its TSV file format (`id\tsplit\ttext`).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub samples: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of samples held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            min_words: 3,
            max_words: 8,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("corpus.samples", "must be positive"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::config(
                "corpus.min_words",
                format!("need 1 <= min_words <= max_words, got {}..{}", self.min_words, self.max_words),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("corpus.test_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Draws `n` uniform content words.
pub fn random_sentence<R: Rng + ?Sized>(vocab: &Vocab, n: usize, rng: &mut R) -> Vec<u32> {
    let ids = vocab.content_ids();
    (0..n).map(|_| rng.random_range(ids.clone())).collect()
}

/// Deterministic corpus: uniform sentence lengths, uniform words. The last
/// `test_fraction` of ids form the test split.
pub fn generate_corpus(cfg: &CorpusConfig, vocab: &Vocab) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_test = (cfg.samples as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.samples - n_test;
    Ok((0..cfg.samples)
        .map(|i| {
            let n = rng.random_range(cfg.min_words..=cfg.max_words);
            let ids = random_sentence(vocab, n, &mut rng);
            Sample {
                id: i as u64,
                split: if i < n_train { Split::Train } else { Split::Test },
                transcript: vocab.detokenize(&ids),
            }
        })
        .collect())
}

pub fn split(samples: &[Sample], which: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == which).cloned().collect()
}

pub fn corpus_to_string(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&format!("{}\t{}\t{}\n", s.id, s.split, s.transcript));
    }
    out
}

pub fn write_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, corpus_to_string(samples))?;
    Ok(())
}

pub fn parse_corpus(text: &str) -> Result<Vec<Sample>> {
    let mut seen = std::collections::HashSet::new();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(split), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Argument(format!("corpus line {}: expected 3 tab-separated fields", i + 1)));
            };
            let id: u64 = id
                .parse()
                .map_err(|_| Error::Argument(format!("corpus line {}: bad id `{id}`", i + 1)))?;
            if !seen.insert(id) {
                return Err(Error::Argument(format!("corpus line {}: duplicate id {id}", i + 1)));
            }
            Ok(Sample {
                id,
                split: split.parse()?,
                transcript: text.to_string(),
            })
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sample>> {
    parse_corpus(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let vocab = Vocab::synthetic(250).unwrap();
        let cfg = CorpusConfig::default();
        let a = generate_corpus(&cfg, &vocab).unwrap();
        let b = generate_corpus(&cfg, &vocab).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2000);
        for s in &a {
            let n = vocab.tokenize(&s.transcript).unwrap().len();
            assert!((cfg.min_words..=cfg.max_words).contains(&n));
        }
        assert_eq!(split(&a, Split::Test).len(), 200);
    }

    #[test]
    fn covers_the_vocabulary() {
        let vocab = Vocab::synthetic(250).unwrap();
        let corpus = generate_corpus(&CorpusConfig::default(), &vocab).unwrap();
        let mut used = std::collections::HashSet::new();
        for s in &corpus {
            used.extend(vocab.tokenize(&s.transcript).unwrap());
        }
        assert!(used.len() as f64 >= 0.95 * 250.0);
    }

    #[test]
    fn tsv_round_trip() {
        let vocab = Vocab::synthetic(30).unwrap();
        let cfg = CorpusConfig {
            samples: 20,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        assert_eq!(parse_corpus(&corpus_to_string(&corpus)).unwrap(), corpus);
        assert!(parse_corpus("1\ttrain\ta\n1\ttest\tb\n").is_err());
        assert!(parse_corpus("1\tdev\ta\n").is_err());
    }
}
