//! Supervision targets: text normalisation, the closed word vocabulary, and
//! pad-extended target embedding sequences with their word/pad masks.
//!
//! A transcript of `n` tokens becomes an `L × D` matrix whose first `n` rows
//! are the tokens' embeddings and whose remaining rows all equal the pad
//! embedding. The word mask covers the tokens plus the first pad (`[0, n]`);
//! the pad mask covers the rest (`[n+1, L)`).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbones::SynthSfm;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::projector::{average_frames, output_length, ProjectorConfig};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const TASK: u32 = 3;
pub const SEP: u32 = 4;
pub const FIRST_CONTENT: u32 = 5;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<task>", "<sep>"];

/// Lowercases, strips punctuation (keeping apostrophes between two
/// alphanumerics) and collapses whitespace. Idempotent.
pub fn normalize(text: &str) -> String {
    let lower: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = String::with_capacity(lower.len());
    let mut pending_space = false;
    for (i, &c) in lower.iter().enumerate() {
        let keep = if c.is_alphanumeric() {
            true
        } else if c == '\'' {
            let prev = i.checked_sub(1).map(|j| lower[j].is_alphanumeric());
            let next = lower.get(i + 1).map(|n| n.is_alphanumeric());
            prev == Some(true) && next == Some(true)
        } else {
            if c.is_whitespace() {
                pending_space = true;
            }
            false
        };
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Closed word-level vocabulary with five reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from content words. Words must already be
    /// normalised single tokens and unique.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            let w = w.as_ref();
            if normalize(w) != w || w.is_empty() || w.contains(' ') {
                return Err(Error::Argument(format!("`{w}` is not a normalised single word")));
            }
            if index.insert(w.to_string(), tokens.len() as u32).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary word `{w}`")));
            }
            tokens.push(w.to_string());
        }
        Ok(Self { tokens, index })
    }

    /// Deterministic pseudo-words built from consonant-vowel syllables.
    pub fn synthetic(content_words: usize) -> Result<Self> {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        let syl = |i: usize| -> String {
            let c = C[i % C.len()] as char;
            let v = V[(i / C.len()) % V.len()] as char;
            format!("{c}{v}")
        };
        let n_syl = C.len() * V.len();
        if content_words > n_syl * n_syl {
            return Err(Error::Argument(format!(
                "at most {} synthetic words are available",
                n_syl * n_syl
            )));
        }
        let words: Vec<String> = (0..content_words)
            .map(|i| {
                let a = i % n_syl;
                let q = i / n_syl;
                let b = (q * 17 + a * 3) % n_syl;
                format!("{}{}", syl(a), syl(b))
            })
            .collect();
        Self::from_words(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT..self.tokens.len() as u32
    }

    pub fn is_reserved(id: u32) -> bool {
        id < FIRST_CONTENT
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Normalises and splits `text`, mapping every word to its id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let norm = normalize(text);
        let mut ids = Vec::new();
        let mut oov = Vec::new();
        for w in norm.split(' ').filter(|w| !w.is_empty()) {
            match self.index.get(w) {
                Some(&id) if !Self::is_reserved(id) => ids.push(id),
                _ => oov.push(w.to_string()),
            }
        }
        if oov.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Vocabulary(oov))
        }
    }

    /// Joins content tokens up to the first EOS; other reserved ids are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| !Self::is_reserved(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Pad-extended target embeddings for one transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSequence {
    pub token_ids: Vec<u32>,
    pub embeddings: Tensor,
    pub first_pad_index: usize,
    pub word_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

impl TargetSequence {
    pub fn len(&self) -> usize {
        self.word_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_mask.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }

    /// Checks mask partition, mask popcounts and pad-row identity against
    /// the pad row of `embed_table`.
    pub fn check_invariants(&self, embed_table: &Tensor) -> Result<()> {
        let (n, l) = (self.token_ids.len(), self.len());
        let fail = |m: String| Err(Error::Contract(m));
        if n + 1 > l || self.first_pad_index != n || self.pad_mask.len() != l {
            return fail(format!("n={n}, L={l}, first_pad_index={}", self.first_pad_index));
        }
        if self.embeddings.rows() != l {
            return fail(format!("{} embedding rows for L={l}", self.embeddings.rows()));
        }
        for i in 0..l {
            if self.word_mask[i] == self.pad_mask[i] {
                return fail(format!("masks do not partition position {i}"));
            }
            if self.word_mask[i] != (i <= n) {
                return fail(format!("word mask wrong at {i}"));
            }
        }
        let pad = embed_table.row(PAD as usize);
        for i in n..l {
            let row = self.embeddings.row(i);
            if row.iter().zip(pad).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return fail(format!("row {i} is not the pad embedding"));
            }
        }
        Ok(())
    }
}

pub fn build_target_from_ids(ids: &[u32], embed_table: &Tensor, len: usize) -> Result<TargetSequence> {
    let n = ids.len();
    if len < n + 1 {
        return Err(Error::Length(format!(
            "projector output length {len} cannot hold {n} tokens plus a pad"
        )));
    }
    let d = embed_table.cols();
    let mut data = Vec::with_capacity(len * d);
    for &id in ids {
        if id as usize >= embed_table.rows() {
            return Err(Error::Range(format!("token id {id} outside embedding table")));
        }
        data.extend_from_slice(embed_table.row(id as usize));
    }
    for _ in n..len {
        data.extend_from_slice(embed_table.row(PAD as usize));
    }
    Ok(TargetSequence {
        token_ids: ids.to_vec(),
        embeddings: Tensor::from_rows(len, d, data)?,
        first_pad_index: n,
        word_mask: (0..len).map(|i| i <= n).collect(),
        pad_mask: (0..len).map(|i| i > n).collect(),
    })
}

pub fn build_target(transcript: &str, vocab: &Vocab, embed_table: &Tensor, len: usize) -> Result<TargetSequence> {
    let ids = vocab.tokenize(transcript)?;
    build_target_from_ids(&ids, embed_table, len)
}

// ---- cache ------------------------------------------------------------

pub const CACHE_MAGIC: &[u8; 4] = b"SMTC";
pub const CACHE_VERSION: u32 = 1;

/// Hash of everything a cached target depends on.
pub fn cache_key(vocab: &Vocab, embed_table: &Tensor, projector: &ProjectorConfig, sfm: &SynthSfm) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in vocab.tokens() {
        h.update(t.as_bytes());
        h.update([0]);
    }
    for d in embed_table.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in embed_table.data() {
        h.update(v.to_le_bytes());
    }
    for v in [projector.kernel, projector.stride, projector.pad, projector.avg_factor] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(sfm.config_fingerprint());
    h.finalize().into()
}

pub fn write_cache(path: &Path, key: &[u8; 32], records: &[(u64, TargetSequence)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(key);
    for (id, t) in records {
        let n = t.token_ids.len();
        let body = 8 + 4 + 4 + 4 * n + 4 * t.embeddings.len();
        buf.extend_from_slice(&(body as u32).to_le_bytes());
        buf.extend_from_slice(&id.to_le_bytes());
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for tid in &t.token_ids {
            buf.extend_from_slice(&tid.to_le_bytes());
        }
        for &v in t.embeddings.data() {
            let f = v as f32;
            if f as f64 != v {
                return Err(Error::Argument(format!(
                    "sample {id}: embedding value {v} is not representable as f32"
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_cache(path: &Path, expected_key: &[u8; 32]) -> Result<Vec<(u64, TargetSequence)>> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::StaleCache(format!("{} is not a target cache", path.display())));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::StaleCache(format!("cache version {version}, expected {CACHE_VERSION}")));
    }
    if r.take(32)? != expected_key {
        return Err(Error::StaleCache(
            "cache was built for a different vocabulary, embedding table or length config".into(),
        ));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let body = r.u32()? as usize;
        let start = r.pos;
        let id = r.u64()?;
        let n = r.u32()? as usize;
        let len = r.u32()? as usize;
        let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let rest = body
            .checked_sub(8 + 4 + 4 + 4 * n)
            .ok_or_else(|| Error::Truncated(format!("record {id} shorter than its header")))?;
        if len == 0 || rest % (4 * len) != 0 {
            return Err(Error::Truncated(format!("record {id} has a ragged embedding block")));
        }
        let d = rest / (4 * len);
        let raw = r.take(rest)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        debug_assert_eq!(r.pos - start, body);
        out.push((
            id,
            TargetSequence {
                first_pad_index: n,
                word_mask: (0..len).map(|i| i <= n).collect(),
                pad_mask: (0..len).map(|i| i > n).collect(),
                token_ids: ids,
                embeddings: Tensor::from_rows(len, d, data)?,
            },
        ));
    }
    Ok(out)
}

/// Builds every sample's target at its projector output length and writes
/// the cache. Samples whose target does not fit are returned, not cached.
pub fn precompute_targets(
    samples: &[Sample],
    vocab: &Vocab,
    embed_table: &Tensor,
    projector: &ProjectorConfig,
    sfm: &SynthSfm,
    path: &Path,
) -> Result<Vec<u64>> {
    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for s in samples {
        let ids = vocab.tokenize(&s.transcript)?;
        let frames = sfm.synth_speech(&ids, s.id)?;
        let avg = average_frames(&frames, projector.avg_factor)?;
        let len = match output_length(avg.rows(), projector) {
            Ok(l) => l,
            Err(_) => {
                skipped.push(s.id);
                continue;
            }
        };
        match build_target_from_ids(&ids, embed_table, len) {
            Ok(t) => records.push((s.id, t)),
            Err(Error::Length(_)) => skipped.push(s.id),
            Err(e) => return Err(e),
        }
    }
    write_cache(path, &cache_key(vocab, embed_table, projector, sfm), &records)?;
    Ok(skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(vocab: &Vocab, d: usize) -> Tensor {
        let data = (0..vocab.len() * d).map(|i| ((i * 7 % 13) as f64) * 0.25 - 1.0).collect();
        Tensor::from_rows(vocab.len(), d, data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Hello,  World!"), "hello world");
        assert_eq!(normalize("i'm here"), "i'm here");
        assert_eq!(normalize("  'quoted' words  "), "quoted words");
        assert_eq!(normalize(""), "");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_on_ascii_soup(s in "[a-zA-Z' ,.!?-]{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn synthetic_vocab_is_unique_and_normalised() {
        let v = Vocab::synthetic(250).unwrap();
        assert_eq!(v.len(), 255);
        for id in v.content_ids() {
            let w = v.token(id).unwrap();
            assert_eq!(normalize(w), w);
        }
        assert_eq!(v.id("<pad>"), Some(PAD));
    }

    #[test]
    fn tokenize_reports_oov_words() {
        let v = Vocab::from_words(&["a", "b"]).unwrap();
        assert_eq!(v.tokenize("A, b!").unwrap(), vec![5, 6]);
        match v.tokenize("a zz b qq") {
            Err(Error::Vocabulary(w)) => assert_eq!(w, vec!["zz", "qq"]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(v.detokenize(&[5, PAD, 6, EOS, 5]), "a b");
    }

    #[test]
    fn build_target_examples() {
        let v = Vocab::from_words(&["a", "b", "c"]).unwrap();
        let e = table(&v, 4);
        let t = build_target("a b", &v, &e, 5).unwrap();
        assert_eq!(t.first_pad_index, 2);
        assert_eq!(t.word_mask, vec![true, true, true, false, false]);
        assert_eq!(t.pad_mask, vec![false, false, false, true, true]);
        assert_eq!(t.embeddings.row(0), e.row(5));
        assert_eq!(t.embeddings.row(4), e.row(PAD as usize));
        t.check_invariants(&e).unwrap();

        let t = build_target("", &v, &e, 3).unwrap();
        assert_eq!(t.word_mask, vec![true, false, false]);
        t.check_invariants(&e).unwrap();

        let t = build_target("a b c", &v, &e, 4).unwrap();
        assert!(t.word_mask.iter().all(|m| *m));
        assert!(t.pad_mask.iter().all(|m| !*m));

        assert!(matches!(build_target("a b c", &v, &e, 3), Err(Error::Length(_))));
        assert!(matches!(build_target("a x", &v, &e, 5), Err(Error::Vocabulary(_))));
    }

    proptest! {
        #[test]
        fn masks_partition_for_any_fit(n in 0usize..12, extra in 1usize..12) {
            let v = Vocab::synthetic(20).unwrap();
            let e = table(&v, 3);
            let ids: Vec<u32> = (0..n).map(|i| FIRST_CONTENT + (i % 20) as u32).collect();
            let t = build_target_from_ids(&ids, &e, n + extra).unwrap();
            t.check_invariants(&e).unwrap();
            prop_assert_eq!(t.word_mask.iter().filter(|m| **m).count(), n + 1);
            prop_assert_eq!(t.pad_mask.iter().filter(|m| **m).count(), extra - 1);
        }
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.smtc");
        let v = Vocab::from_words(&["a", "b", "c"]).unwrap();
        let e = table(&v, 4);
        let recs = vec![
            (3u64, build_target("a b", &v, &e, 4).unwrap()),
            (9u64, build_target("c", &v, &e, 2).unwrap()),
        ];
        let key = [7u8; 32];
        write_cache(&path, &key, &recs).unwrap();
        assert_eq!(read_cache(&path, &key).unwrap(), recs);
        assert!(matches!(read_cache(&path, &[8u8; 32]), Err(Error::StaleCache(_))));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_cache(&path, &key), Err(Error::Truncated(_))));
    }
}
