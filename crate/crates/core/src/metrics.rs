//! Edit distance, WER/CER, and end-to-end decode evaluation.
//!
//! Corpus scores are micro-averaged: edits and reference lengths are summed
//! over samples before dividing. An empty reference scores
//! `100 · len(hypothesis)`.

use crate::backbones::{SynthSfm, ToyDecoder};
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::projector::{average_frames, ProjectorModel};
use crate::targets::normalize;
use serde::{Deserialize, Serialize};

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn rate(edits: usize, ref_len: usize, hyp_len: usize) -> f64 {
    if ref_len == 0 {
        100.0 * hyp_len as f64
    } else {
        100.0 * edits as f64 / ref_len as f64
    }
}

/// Word edits and reference word count.
pub fn word_edits(reference: &str, hypothesis: &str) -> (usize, usize, usize) {
    let (r, h) = (words(reference), words(hypothesis));
    (edit_distance(&r, &h), r.len(), h.len())
}

/// Character edits (spaces included) and reference character count.
pub fn char_edits(reference: &str, hypothesis: &str) -> (usize, usize, usize) {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    (edit_distance(&r, &h), r.len(), h.len())
}

pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let (e, r, h) = word_edits(reference, hypothesis);
    rate(e, r, h)
}

pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let (e, r, h) = char_edits(reference, hypothesis);
    rate(e, r, h)
}

/// Micro-averaged WER over pairs.
pub fn corpus_wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> f64 {
    let (mut e, mut r, mut h) = (0, 0, 0);
    for (a, b) in refs.iter().zip(hyps) {
        let (de, dr, dh) = word_edits(a.as_ref(), b.as_ref());
        e += de;
        r += dr;
        h += dh;
    }
    rate(e, r, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub id: u64,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
    pub cer: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub wer: f64,
    pub cer: f64,
    pub truncations: usize,
}

impl EvalReport {
    pub fn from_pairs(items: Vec<(u64, String, String, bool)>) -> Self {
        let (mut we, mut wr, mut wh, mut ce, mut cr, mut ch) = (0, 0, 0, 0, 0, 0);
        let mut truncations = 0;
        let samples = items
            .into_iter()
            .map(|(id, reference, hypothesis, truncated)| {
                let w = word_edits(&reference, &hypothesis);
                let c = char_edits(&reference, &hypothesis);
                (we, wr, wh) = (we + w.0, wr + w.1, wh + w.2);
                (ce, cr, ch) = (ce + c.0, cr + c.1, ch + c.2);
                truncations += usize::from(truncated);
                SampleEval {
                    id,
                    wer: rate(w.0, w.1, w.2),
                    cer: rate(c.0, c.1, c.2),
                    reference,
                    hypothesis,
                    truncated,
                }
            })
            .collect();
        Self {
            samples,
            wer: rate(we, wr, wh),
            cer: rate(ce, cr, ch),
            truncations,
        }
    }

    /// Tab-separated per-sample rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\twer\tcer\ttruncated\treference\thypothesis\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{}\t{}\t{}\n",
                s.id, s.wer, s.cer, s.truncated, s.reference, s.hypothesis
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} wer={:.2} cer={:.2} truncations={}",
            self.samples.len(),
            self.wer,
            self.cer,
            self.truncations
        )
    }
}

/// What feeds the decoder's repeat context during evaluation.
#[derive(Clone, Copy)]
pub enum ContextSource<'a> {
    /// Frames from the synthetic frontend through the projector.
    Projector {
        projector: &'a ProjectorModel,
        sfm: &'a SynthSfm,
    },
    /// The transcript's own clean token embeddings.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_tokens: usize,
    /// Normalise hypotheses before scoring.
    pub normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_tokens: 150,
            normalize: true,
        }
    }
}

/// Greedy-decodes every sample and scores it against its transcript.
pub fn evaluate(source: ContextSource<'_>, dec: &ToyDecoder, samples: &[Sample], opts: EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation corpus is empty".into()));
    }
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let ids = dec.vocab.tokenize(&s.transcript)?;
        let middle = match source {
            ContextSource::Oracle => dec.embed_ids(&ids),
            ContextSource::Projector { projector, sfm } => {
                let frames = sfm.synth_speech(&ids, s.id)?;
                projector.project(&average_frames(&frames, projector.config.avg_factor)?)?
            }
        };
        let decoded = dec.greedy_decode(&dec.context(&middle)?, opts.max_tokens)?;
        let raw = dec.vocab.detokenize(decoded.words());
        let hyp = if opts.normalize { normalize(&raw) } else { raw };
        items.push((s.id, normalize(&s.transcript), hyp, decoded.truncated));
    }
    Ok(EvalReport::from_pairs(items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "b", "c"]), 0);
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "x", "c"]), 1);
        assert_eq!(wer("a b", "a b"), 0.0);
        assert_eq!(cer("a b", "a b"), 0.0);
        assert_eq!(cer("ab", "ac"), 50.0);
        assert_eq!(wer("", "x y"), 200.0);
        assert_eq!(wer("", ""), 0.0);
    }

    fn round1(x: f64) -> f64 {
        (x * 10.0).round() / 10.0
    }

    #[test]
    fn reference_scoring_examples() {
        let r = "i am from the cutter lying off the coast";
        let h = "i'm from the cutter lying off the coast";
        assert_eq!(word_edits(r, h).0, 2);
        assert_eq!(round1(wer(r, h)), 22.2);
        assert_eq!(round1(cer(r, h)), 5.0);

        let r = "paul an apostle not of men et cetera";
        let h = "paul an apostle not of men nor through man but through jesus christ and god \
                 the father who raised him from the dead";
        assert_eq!(round1(wer(r, h)), 212.5);
        assert_eq!(round1(cer(r, h)), 222.2);

        let r = "her sister is ntombizenhlanhla amanda zuma";
        let h = vec!["her sister"; 42].join(" ");
        assert_eq!(round1(wer(r, &h)), 1366.7);
        assert_eq!(round1(cer(r, &h)), 1047.6);
    }

    #[test]
    fn corpus_wer_is_micro_averaged() {
        let refs = ["a b c d", "e"];
        let hyps = ["a b c d", "x"];
        assert_eq!(corpus_wer(&refs, &hyps), 20.0);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..4, 0..10),
            b in proptest::collection::vec(0u8..4, 0..10),
            c in proptest::collection::vec(0u8..4, 0..10),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &b) >= a.len().abs_diff(b.len()));
        }
    }
}
