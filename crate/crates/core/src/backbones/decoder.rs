//! Small decoder-only transformer standing in for a frozen language model.
//!
//! Pre-norm layers, learned absolute positions and an output head tied to
//! the token embedding table. With `embed_rank > 0` the table is a learned
//! linear image `basis · proj` of a fixed `V × embed_rank` basis; the basis
//! is the synthetic frontend's acoustic table, which makes the
//! acoustic-to-embedding map exactly linear. It is pretrained on a repeat
//! task
//!
//! ```text
//! context  = [TASK] e(w1) … e(wn) (e(PAD) × k) [SEP]
//! targets  = w1 … wn EOS            (teacher forced)
//! ```
//!
//! and then frozen. Greedy decoding runs on a key/value cache instead of the
//! tape, so it costs one row per generated token.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::corpus::{random_sentence, Sample};
use crate::error::{Error, Result};
use crate::metrics::corpus_wer;
use crate::nn::{LayerNorm, Linear};
use crate::optim::{AdamWConfig, OptimizerState, ScheduleConfig, ScheduleMode};
use crate::params::{ParamId, ParamSet};
use crate::seed;
use crate::targets::{Vocab, EOS, FIRST_CONTENT, PAD, SEP, TASK};
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub content_words: usize,
    /// Width of the fixed embedding basis; 0 gives a free `V × d_model` table.
    pub embed_rank: usize,
    pub embed_std: f64,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            max_positions: 256,
            content_words: 250,
            embed_rank: 16,
            embed_std: 0.02,
            init_seed: 23,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "decoder.heads",
                format!("{} heads must divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("decoder.layers", "must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("decoder.ffn_mult", "must be positive"));
        }
        if self.max_positions < 8 {
            return Err(Error::config("decoder.max_positions", "must be at least 8"));
        }
        if self.content_words == 0 {
            return Err(Error::config("decoder.content_words", "must be positive"));
        }
        if !(self.embed_std > 0.0 && self.embed_std.is_finite()) {
            return Err(Error::config("decoder.embed_std", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderPretrainConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub pad_prob: f64,
    pub eval_every: u64,
    /// Held-out greedy WER (percent) at which pretraining may stop.
    pub gate_wer: f64,
    /// Share of held-out samples whose output must survive appended pads.
    pub gate_pad_invariance: f64,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for DecoderPretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 6000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            pad_prob: 0.5,
            eval_every: 250,
            gate_wer: 2.0,
            gate_pad_invariance: 0.98,
            max_words: 8,
            seed: 5,
        }
    }
}

impl DecoderPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "decoder_pretrain",
                "max_steps, batch_size and eval_every must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("decoder_pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gate_pad_invariance) {
            return Err(Error::config("decoder_pretrain.gate_pad_invariance", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.pad_prob) {
            return Err(Error::config("decoder_pretrain.pad_prob", "must lie in [0, 1]"));
        }
        if self.max_words == 0 {
            return Err(Error::config("decoder_pretrain.max_words", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Result of one greedy decode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, including the terminating EOS when one was produced.
    pub tokens: Vec<u32>,
    /// True when `max_tokens` ran out before an EOS.
    pub truncated: bool,
}

impl Decoded {
    /// Generated ids up to, not including, EOS.
    pub fn words(&self) -> &[u32] {
        let end = self.tokens.iter().position(|&t| t == EOS).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

#[derive(Clone, Copy, Debug)]
enum Embedding {
    Table(ParamId),
    Factored { basis: ParamId, proj: ParamId },
}

pub struct ToyDecoder {
    pub config: DecoderConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    embed: Embedding,
    /// Materialised embedding table, kept in sync with the parameters.
    table: Tensor,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    frozen: bool,
    forward_calls: AtomicUsize,
}

impl Clone for ToyDecoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            embed: self.embed,
            table: self.table.clone(),
            pos: self.pos,
            layers: self.layers.clone(),
            ln_f: self.ln_f,
            frozen: self.frozen,
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl std::fmt::Debug for ToyDecoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyDecoder")
            .field("config", &self.config)
            .field("frozen", &self.frozen)
            .field("parameters", &self.params.count())
            .finish()
    }
}

impl ToyDecoder {
    /// A fresh decoder. `basis` must be given, with shape
    /// `vocab × embed_rank`, exactly when `config.embed_rank > 0`.
    pub fn new(config: DecoderConfig, basis: Option<&Tensor>) -> Result<Self> {
        config.validate()?;
        let v = config.content_words + FIRST_CONTENT as usize;
        match (config.embed_rank, basis) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Argument("a free embedding table takes no basis".into())),
            (_, None) => return Err(Error::Argument("decoder.embed_rank > 0 needs an embedding basis".into())),
            (r, Some(b)) => {
                if b.shape() != [v, r] {
                    return Err(Error::Dimension(format!("embedding basis {:?}, expected [{v}, {r}]", b.shape())));
                }
            }
        }
        Self::build(config, basis.cloned())
    }

    fn build(config: DecoderConfig, basis: Option<Tensor>) -> Result<Self> {
        let vocab = Vocab::synthetic(config.content_words)?;
        let d = config.d_model;
        let mut rng = seed::rng(config.init_seed, 0xdec0);
        let mut params = ParamSet::new();
        let embed = match basis {
            None => Embedding::Table(params.add("embed", Tensor::randn(&[vocab.len(), d], config.embed_std, &mut rng))),
            Some(b) => {
                let r = config.embed_rank;
                let basis = params.add("embed.basis", b);
                params.get_mut(basis).requires_grad = false;
                let std = config.embed_std / (r as f64).sqrt();
                let proj = params.add("embed.proj", Tensor::randn(&[r, d], std, &mut rng));
                Embedding::Factored { basis, proj }
            }
        };
        let pos = params.add("pos", Tensor::randn(&[config.max_positions, d], config.embed_std, &mut rng));
        let layers = (0..config.layers)
            .map(|i| {
                let n = format!("layer{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(&mut params, &format!("{n}.ln1"), d),
                    q: Linear::new(&mut params, &format!("{n}.attn.q"), d, d, &mut rng),
                    k: Linear::new(&mut params, &format!("{n}.attn.k"), d, d, &mut rng),
                    v: Linear::new(&mut params, &format!("{n}.attn.v"), d, d, &mut rng),
                    o: Linear::new(&mut params, &format!("{n}.attn.o"), d, d, &mut rng),
                    ln2: LayerNorm::new(&mut params, &format!("{n}.ln2"), d),
                    ff1: Linear::new(&mut params, &format!("{n}.ffn.1"), d, d * config.ffn_mult, &mut rng),
                    ff2: Linear::new(&mut params, &format!("{n}.ffn.2"), d * config.ffn_mult, d, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "ln_f", d);
        let mut dec = Self {
            config,
            vocab,
            params,
            embed,
            table: Tensor::zeros(&[0, d]),
            pos,
            layers,
            ln_f,
            frozen: false,
            forward_calls: AtomicUsize::new(0),
        };
        dec.refresh_table()?;
        Ok(dec)
    }

    /// Recomputes the materialised table after a parameter update.
    pub(crate) fn refresh_table(&mut self) -> Result<()> {
        let mut table = match self.embed {
            Embedding::Table(id) => self.params.value(id).clone(),
            Embedding::Factored { basis, proj } => self.params.value(basis).matmul(self.params.value(proj))?,
        };
        if self.frozen {
            table.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.table = table;
        Ok(())
    }

    /// The fixed basis of a factored embedding table.
    pub fn basis(&self) -> Option<&Tensor> {
        match self.embed {
            Embedding::Table(_) => None,
            Embedding::Factored { basis, .. } => Some(self.params.value(basis)),
        }
    }

    /// The embedding table as a tape node: differentiable while training,
    /// a constant copy of the rounded table once frozen.
    fn embed_var(&self, tape: &mut Tape) -> Result<Var> {
        if self.frozen {
            return tape.constant(self.table.clone());
        }
        match self.embed {
            Embedding::Table(id) => Ok(tape.param(&self.params, id)),
            Embedding::Factored { basis, proj } => {
                let b = tape.param(&self.params, basis);
                let p = tape.param(&self.params, proj);
                tape.matmul(b, p)
            }
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn embed_table(&self) -> &Tensor {
        &self.table
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes every parameter. The embedding table is rounded to values
    /// exactly representable in single precision so cached targets match it
    /// bit for bit.
    pub fn freeze(&mut self) {
        if let Embedding::Table(id) = self.embed {
            let e = self.params.get_mut(id);
            e.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.params.set_requires_grad(false);
        self.frozen = true;
        self.refresh_table().expect("table shapes were checked at construction");
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Number of forward computations (teacher-forced passes and greedy
    /// decodes) run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Embedding rows for `ids`, as plain values.
    pub fn embed_ids(&self, ids: &[u32]) -> Tensor {
        let e = self.embed_table();
        let d = e.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(e.row(id as usize));
        }
        Tensor::from_rows(ids.len(), d, data).expect("consistent shape")
    }

    /// Repeat-task context around plain embedding rows.
    pub fn context(&self, middle: &Tensor) -> Result<Tensor> {
        if middle.cols() != self.d_model() && middle.rows() > 0 {
            return Err(Error::Dimension(format!(
                "context rows have width {}, decoder expects {}",
                middle.cols(),
                self.d_model()
            )));
        }
        let d = self.d_model();
        let e = self.embed_table();
        let mut data = Vec::with_capacity((middle.rows() + 2) * d);
        data.extend_from_slice(e.row(TASK as usize));
        data.extend_from_slice(middle.data());
        data.extend_from_slice(e.row(SEP as usize));
        Tensor::from_rows(middle.rows() + 2, d, data)
    }

    /// Repeat-task context around a tape node, keeping it differentiable.
    pub fn context_var(&self, tape: &mut Tape, middle: Var) -> Result<Var> {
        if tape.value(middle).cols() != self.d_model() {
            return Err(Error::Dimension(format!(
                "context rows have width {}, decoder expects {}",
                tape.value(middle).cols(),
                self.d_model()
            )));
        }
        let e = self.embed_var(tape)?;
        let task = tape.gather(e, &[TASK as usize])?;
        let sep = tape.gather(e, &[SEP as usize])?;
        tape.concat_rows(&[task, middle, sep])
    }

    /// Teacher-forced pass. `targets` are the labels (normally ending in
    /// EOS); all but the last are fed back as inputs after the context.
    /// Returns the logits at the predicting positions and the mean CE.
    pub fn decoder_forward(&self, tape: &mut Tape, context: Var, targets: &[u32]) -> Result<(Var, Var)> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let m = tape.value(context).rows();
        if tape.value(context).cols() != self.d_model() {
            return Err(Error::Dimension(format!(
                "context width {}, decoder expects {}",
                tape.value(context).cols(),
                self.d_model()
            )));
        }
        if targets.is_empty() || m == 0 {
            return Err(Error::Argument("decoder_forward needs a context and at least one target".into()));
        }
        let total = m + targets.len() - 1;
        if total > self.config.max_positions {
            return Err(Error::Length(format!(
                "sequence of {total} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let e = self.embed_var(tape)?;
        let inputs: Vec<usize> = targets[..targets.len() - 1].iter().map(|&t| t as usize).collect();
        let x = if inputs.is_empty() {
            context
        } else {
            let fed = tape.gather(e, &inputs)?;
            tape.concat_rows(&[context, fed])?
        };
        let p = tape.param(&self.params, self.pos);
        let positions: Vec<usize> = (0..total).collect();
        let p = tape.gather(p, &positions)?;
        let mut h = tape.add(x, p)?;
        for l in &self.layers {
            let a = l.ln1.forward(tape, &self.params, h)?;
            let q = l.q.forward(tape, &self.params, a)?;
            let k = l.k.forward(tape, &self.params, a)?;
            let v = l.v.forward(tape, &self.params, a)?;
            let att = tape.attention(q, k, v, self.config.heads, true)?;
            let att = l.o.forward(tape, &self.params, att)?;
            h = tape.add(h, att)?;
            let f = l.ln2.forward(tape, &self.params, h)?;
            let f = l.ff1.forward(tape, &self.params, f)?;
            let f = tape.gelu(f)?;
            let f = l.ff2.forward(tape, &self.params, f)?;
            h = tape.add(h, f)?;
        }
        let h = tape.slice_rows(h, m - 1, total)?;
        let h = self.ln_f.forward(tape, &self.params, h)?;
        let logits = tape.matmul_t(h, e)?;
        let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let ce = tape.cross_entropy(logits, &labels)?;
        Ok((logits, ce))
    }

    /// Argmax decoding from `context` until EOS or `max_tokens`.
    pub fn greedy_decode(&self, context: &Tensor, max_tokens: usize) -> Result<Decoded> {
        if max_tokens == 0 {
            return Err(Error::Argument("max_tokens must be at least 1".into()));
        }
        if context.rows() == 0 {
            return Err(Error::Argument("empty decoding context".into()));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut cache = KvCache::new(self.config.layers);
        let mut logits = Vec::new();
        for r in 0..context.rows() {
            logits = self.step(&mut cache, context.row(r))?;
        }
        let mut tokens = Vec::new();
        loop {
            let next = argmax(&logits) as u32;
            tokens.push(next);
            if next == EOS {
                return Ok(Decoded { tokens, truncated: false });
            }
            if tokens.len() == max_tokens || cache.len >= self.config.max_positions {
                return Ok(Decoded { tokens, truncated: true });
            }
            let row = self.embed_table().row(next as usize).to_vec();
            logits = self.step(&mut cache, &row)?;
        }
    }

    /// Next-token logits after each row of `rows`, via the cached path.
    pub fn incremental_logits(&self, rows: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut cache = KvCache::new(self.config.layers);
        (0..rows.rows()).map(|r| self.step(&mut cache, rows.row(r))).collect()
    }

    fn step(&self, cache: &mut KvCache, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.d_model();
        if x.len() != d {
            return Err(Error::Dimension(format!("input row of width {}, expected {d}", x.len())));
        }
        let t = cache.len;
        if t >= self.config.max_positions {
            return Err(Error::Length(format!("position {t} beyond max_positions")));
        }
        let p = &self.params;
        let mut h: Vec<f64> = x.iter().zip(p.value(self.pos).row(t)).map(|(a, b)| a + b).collect();
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, l) in self.layers.iter().enumerate() {
            let a = ln_row(&h, p.value(l.ln1.gamma).data(), p.value(l.ln1.beta).data());
            let q = linear_row(p, &l.q, &a);
            let k = linear_row(p, &l.k, &a);
            let v = linear_row(p, &l.v, &a);
            cache.k[li].extend_from_slice(&k);
            cache.v[li].extend_from_slice(&v);
            let (ks, vs) = (&cache.k[li], &cache.v[li]);
            let n = t + 1;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &ks[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vh = &vs[j * d + hd * dh..j * d + (hd + 1) * dh];
                    out.iter_mut().zip(vh).for_each(|(o, v)| *o += w * v);
                }
            }
            let o = linear_row(p, &l.o, &att);
            h.iter_mut().zip(&o).for_each(|(h, o)| *h += o);
            let f = ln_row(&h, p.value(l.ln2.gamma).data(), p.value(l.ln2.beta).data());
            let mut f = linear_row(p, &l.ff1, &f);
            f.iter_mut().for_each(|x| *x = gelu(*x));
            let f = linear_row(p, &l.ff2, &f);
            h.iter_mut().zip(&f).for_each(|(h, f)| *h += f);
        }
        cache.len += 1;
        let h = ln_row(&h, p.value(self.ln_f.gamma).data(), p.value(self.ln_f.beta).data());
        let e = self.embed_table();
        let mut logits = vec![0.0; e.rows()];
        gemm(&h, 1, d, false, e.data(), e.rows(), d, true, &mut logits, 0.0);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite decoder logits"));
        }
        Ok(logits)
    }

    /// Snapshot of the decoder weights, keyed by a hash of its config.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(&self.params, None, 0, self.config_hash()?))
    }

    pub fn config_hash(&self) -> Result<[u8; 32]> {
        let text = toml::to_string(&self.config).map_err(|e| Error::Argument(e.to_string()))?;
        Ok(config_hash(&text))
    }

    /// Rebuilds a frozen decoder from a checkpoint written by
    /// [`ToyDecoder::to_checkpoint`] of a frozen decoder.
    pub fn from_checkpoint(config: DecoderConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let placeholder = (config.embed_rank > 0)
            .then(|| Tensor::zeros(&[config.content_words + FIRST_CONTENT as usize, config.embed_rank]));
        let mut dec = Self::build(config, placeholder)?;
        let hash = dec.config_hash()?;
        ck.restore(&mut dec.params, None, Some(&hash))?;
        dec.freeze();
        Ok(dec)
    }

    /// Greedy repeat of `ids`, optionally with `pads` pad embeddings appended.
    pub fn repeat(&self, ids: &[u32], pads: usize, max_tokens: usize) -> Result<Decoded> {
        let mut with_pads = ids.to_vec();
        with_pads.extend(std::iter::repeat_n(PAD, pads));
        let ctx = self.context(&self.embed_ids(&with_pads))?;
        self.greedy_decode(&ctx, max_tokens)
    }
}

struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            len: 0,
        }
    }
}

fn linear_row(p: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = p.value(l.w);
    let (i, o) = (w.rows(), w.cols());
    let mut y = p.value(l.b).data().to_vec();
    gemm(x, 1, i, false, w.data(), i, o, false, &mut y, 1.0);
    y
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mu) * rs * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Outcome of decoder pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderPretrainReport {
    pub steps: u64,
    pub heldout_wer: f64,
    /// Share of held-out samples whose greedy output is unchanged when pads
    /// are appended to the context.
    pub pad_invariance: f64,
    pub log: Vec<String>,
}

/// Greedy repeat WER over `samples`, with and without appended pads.
pub fn repeat_eval(dec: &ToyDecoder, samples: &[Sample], seed_base: u64) -> Result<(f64, f64)> {
    let mut refs = Vec::with_capacity(samples.len());
    let mut hyps = Vec::with_capacity(samples.len());
    let mut same = 0usize;
    for s in samples {
        let ids = dec.vocab.tokenize(&s.transcript)?;
        let clean = dec.repeat(&ids, 0, 150)?;
        let mut rng = seed::rng(seed_base, s.id);
        let k = rng.random_range(1..=ids.len().max(1));
        let padded = dec.repeat(&ids, k, 150)?;
        if padded.words() == clean.words() {
            same += 1;
        }
        refs.push(s.transcript.clone());
        hyps.push(dec.vocab.detokenize(clean.words()));
    }
    let wer = corpus_wer(&refs, &hyps);
    Ok((wer, same as f64 / samples.len().max(1) as f64))
}

/// Trains a fresh decoder on the repeat task until held-out greedy WER
/// reaches the gate, then freezes it.
pub fn pretrain_decoder(
    train: &[Sample],
    heldout: &[Sample],
    config: DecoderConfig,
    basis: Option<&Tensor>,
    pcfg: &DecoderPretrainConfig,
) -> Result<(ToyDecoder, DecoderPretrainReport)> {
    pcfg.validate()?;
    if heldout.is_empty() {
        return Err(Error::Argument("decoder pretraining needs held-out samples".into()));
    }
    let mut dec = ToyDecoder::new(config, basis)?;
    let train_ids = train
        .iter()
        .map(|s| dec.vocab.tokenize(&s.transcript))
        .collect::<Result<Vec<_>>>()?;
    let schedule = ScheduleConfig {
        base_lr: pcfg.lr,
        warmup_steps: pcfg.warmup_steps.min(pcfg.max_steps),
        total_steps: pcfg.max_steps,
        initial_lr: 0.0,
        mode: ScheduleMode::WarmupCosine,
    };
    schedule.validate()?;
    let mut opt = OptimizerState::new(AdamWConfig::default(), &dec.params);
    let mut rng = seed::rng(pcfg.seed, 0x9e7a);
    let mut tape = Tape::new();
    let mut log = Vec::new();
    let mut last_wer = f64::INFINITY;
    for step in 1..=pcfg.max_steps {
        dec.params.zero_grad();
        let mut loss_sum = 0.0;
        for _ in 0..pcfg.batch_size {
            let ids = if !train_ids.is_empty() && rng.random::<bool>() {
                train_ids[rng.random_range(0..train_ids.len())].clone()
            } else {
                let n = rng.random_range(1..=pcfg.max_words);
                random_sentence(&dec.vocab, n, &mut rng)
            };
            let pads = if rng.random::<f64>() < pcfg.pad_prob {
                rng.random_range(1..=ids.len().max(1))
            } else {
                0
            };
            let mut input: Vec<usize> = vec![TASK as usize];
            input.extend(ids.iter().map(|&i| i as usize));
            input.extend(std::iter::repeat_n(PAD as usize, pads));
            input.push(SEP as usize);
            let mut targets = ids.clone();
            targets.push(EOS);
            tape.reset();
            let e = dec.embed_var(&mut tape)?;
            let ctx = tape.gather(e, &input)?;
            let (_, ce) = dec.decoder_forward(&mut tape, ctx, &targets)?;
            loss_sum += tape.value(ce).item();
            tape.backward(ce)?;
            tape.accumulate_into(&mut dec.params);
        }
        dec.params.scale_grads(1.0 / pcfg.batch_size as f64);
        dec.params.clip_grad_norm(1.0);
        opt.step(&mut dec.params, schedule.lr_at(step)?)?;
        dec.refresh_table()?;
        let loss = loss_sum / pcfg.batch_size as f64;
        if step % pcfg.eval_every == 0 || step == pcfg.max_steps {
            let (wer, pad) = repeat_eval(&dec, heldout, pcfg.seed)?;
            last_wer = wer;
            log.push(format!("step={step} ce={loss} heldout_wer={wer} pad_invariance={pad}"));
            log::info!("decoder pretrain step={step} ce={loss:.4} heldout_wer={wer:.2} pad_invariance={pad:.3}");
            if wer <= pcfg.gate_wer && pad >= pcfg.gate_pad_invariance {
                dec.freeze();
                let (wer, pad_invariance) = repeat_eval(&dec, heldout, pcfg.seed)?;
                if wer > pcfg.gate_wer || pad_invariance < pcfg.gate_pad_invariance {
                    return Err(Error::TrainingFailure {
                        message: "held-out scores left the gate after freezing".into(),
                        final_wer: wer,
                    });
                }
                return Ok((
                    dec,
                    DecoderPretrainReport {
                        steps: step,
                        heldout_wer: wer,
                        pad_invariance,
                        log,
                    },
                ));
            }
        }
    }
    Err(Error::TrainingFailure {
        message: format!(
            "repeat task did not reach WER <= {}% with pad invariance >= {} within {} steps",
            pcfg.gate_wer, pcfg.gate_pad_invariance, pcfg.max_steps
        ),
        final_wer: last_wer,
    })
}
