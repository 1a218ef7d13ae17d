//! The speech-to-embedding projector.
//!
//! Input frames are averaged in groups, then pass through two compression
//! blocks. Each block is a strided 1-D convolution (halving the length), a
//! sinusoidal position encoding, a stack of post-norm transformer encoder
//! layers and a widening fully connected layer. A final square fully
//! connected layer produces vectors in the decoder's embedding space.
//!
//! ```text
//! frames (T × d_in) ─avg→ (T/2 × d_in)
//!   block 1: conv(k,s,p) → +pos → enc×N → FC d_in→d_mid
//!   block 2: conv(k,s,p) → +pos → enc×N → FC d_mid→d_out
//!   FC d_out→d_out
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, sinusoidal_positions, LayerNorm, Linear, Mode};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub d_in: usize,
    pub d_mid: usize,
    pub d_out: usize,
    pub layers_per_block: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dropout: f64,
    pub avg_factor: usize,
    pub init_seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_mid: 32,
            d_out: 64,
            layers_per_block: 6,
            heads: 2,
            ffn_mult: 4,
            kernel: 6,
            stride: 2,
            pad: 2,
            dropout: 0.0,
            avg_factor: 2,
            init_seed: 17,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("projector.{field}"), msg));
        if !(self.d_in >= 1 && self.d_in <= self.d_mid && self.d_mid <= self.d_out) {
            return bad(
                "d_mid",
                format!(
                    "dimensions must satisfy 1 <= d_in <= d_mid <= d_out, got {} / {} / {}",
                    self.d_in, self.d_mid, self.d_out
                ),
            );
        }
        if !(self.kernel > self.stride && self.stride >= 1) {
            return bad("kernel", format!("need kernel > stride >= 1, got {} / {}", self.kernel, self.stride));
        }
        if self.layers_per_block == 0 {
            return bad("layers_per_block", "must be >= 1".into());
        }
        if self.heads == 0 || !self.d_in.is_multiple_of(self.heads) || !self.d_mid.is_multiple_of(self.heads) {
            return bad(
                "heads",
                format!("{} heads must divide d_in {} and d_mid {}", self.heads, self.d_in, self.d_mid),
            );
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.avg_factor == 0 {
            return bad("avg_factor", "must be >= 1".into());
        }
        Ok(())
    }

    fn block_len(&self, t: usize) -> Option<usize> {
        conv_out_len(t, self.kernel, self.stride, self.pad)
    }

    /// Smallest averaged input length that survives both convolutions.
    pub fn min_input_len(&self) -> usize {
        (1..)
            .find(|&t| self.block_len(t).and_then(|l| self.block_len(l)).is_some())
            .expect("some length is admissible")
    }
}

/// Projector output length for an averaged input of length `t_avg`.
pub fn output_length(t_avg: usize, cfg: &ProjectorConfig) -> Result<usize> {
    cfg.block_len(t_avg)
        .and_then(|l| cfg.block_len(l))
        .ok_or(Error::InputLength {
            len: t_avg,
            min: cfg.min_input_len(),
        })
}

/// Averages consecutive groups of `factor` frames. A trailing group shorter
/// than `factor` is averaged as-is, so the output has `ceil(T / factor)` rows.
pub fn average_frames(frames: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Argument("averaging factor must be >= 1".into()));
    }
    let (t, d) = (frames.rows(), frames.cols());
    let out_len = t.div_ceil(factor);
    let mut data = vec![0.0; out_len * d];
    for (o, out) in data.chunks_mut(d.max(1)).enumerate().take(out_len) {
        let start = o * factor;
        let end = (start + factor).min(t);
        for r in start..end {
            for (acc, v) in out.iter_mut().zip(frames.row(r)) {
                *acc += v;
            }
        }
        let n = (end - start) as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::from_rows(out_len, d, data)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(set: &mut ParamSet, name: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(set, &format!("{name}.attn.q"), d, d, rng),
            k: Linear::new(set, &format!("{name}.attn.k"), d, d, rng),
            v: Linear::new(set, &format!("{name}.attn.v"), d, d, rng),
            o: Linear::new(set, &format!("{name}.attn.o"), d, d, rng),
            ln1: LayerNorm::new(set, &format!("{name}.ln1"), d),
            ff1: Linear::new(set, &format!("{name}.ffn.1"), d, d * ffn, rng),
            ff2: Linear::new(set, &format!("{name}.ffn.2"), d * ffn, d, rng),
            ln2: LayerNorm::new(set, &format!("{name}.ln2"), d),
        }
    }

    /// Post-norm: `x = LN(x + Attn(x)); x = LN(x + FFN(x))`.
    fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var, heads: usize, mode: &mut Mode<'_>) -> Result<Var> {
        let q = self.q.forward(tape, set, x)?;
        let k = self.k.forward(tape, set, x)?;
        let v = self.v.forward(tape, set, x)?;
        let a = tape.attention(q, k, v, heads, false)?;
        let a = self.o.forward(tape, set, a)?;
        let a = dropout(tape, a, mode)?;
        let x = tape.add(x, a)?;
        let x = self.ln1.forward(tape, set, x)?;
        let f = self.ff1.forward(tape, set, x)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, set, f)?;
        let f = dropout(tape, f, mode)?;
        let x = tape.add(x, f)?;
        self.ln2.forward(tape, set, x)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv_w: ParamId,
    conv_b: ParamId,
    layers: Vec<EncoderLayer>,
    fc: Linear,
    width: usize,
}

impl Block {
    fn new(set: &mut ParamSet, name: &str, cfg: &ProjectorConfig, d: usize, d_next: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cfg.kernel * d;
        let conv_w = set.add(
            format!("{name}.conv.w"),
            Tensor::randn(&[fan_in, d], (1.0 / fan_in as f64).sqrt(), rng),
        );
        let conv_b = set.add(format!("{name}.conv.b"), Tensor::zeros(&[d]));
        let layers = (0..cfg.layers_per_block)
            .map(|i| EncoderLayer::new(set, &format!("{name}.layer{i}"), d, cfg.ffn_mult, rng))
            .collect();
        let fc = Linear::new(set, &format!("{name}.fc"), d, d_next, rng);
        Self {
            conv_w,
            conv_b,
            layers,
            fc,
            width: d,
        }
    }

    fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var, cfg: &ProjectorConfig, mode: &mut Mode<'_>) -> Result<Var> {
        let w = tape.param(set, self.conv_w);
        let b = tape.param(set, self.conv_b);
        let h = tape.conv1d(x, w, b, cfg.kernel, cfg.stride, cfg.pad)?;
        let len = tape.value(h).rows();
        let pos = tape.constant(sinusoidal_positions(len, self.width))?;
        let mut h = tape.add(h, pos)?;
        for layer in &self.layers {
            h = layer.forward(tape, set, h, cfg.heads, mode)?;
        }
        self.fc.forward(tape, set, h)
    }
}

/// Trainable projector weights plus their layout.
#[derive(Clone, Debug)]
pub struct ProjectorModel {
    pub config: ProjectorConfig,
    pub params: ParamSet,
    block1: Block,
    block2: Block,
    head: Linear,
}

impl ProjectorModel {
    pub fn new(config: ProjectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let block1 = Block::new(&mut params, "block1", &config, config.d_in, config.d_mid, &mut rng);
        let block2 = Block::new(&mut params, "block2", &config, config.d_mid, config.d_out, &mut rng);
        let head = Linear::new(&mut params, "head", config.d_out, config.d_out, &mut rng);
        Ok(Self {
            config,
            params,
            block1,
            block2,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Forward pass on already-averaged frames (`T × d_in`).
    pub fn forward(&self, tape: &mut Tape, frames: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let t = tape.value(frames);
        if t.cols() != self.config.d_in {
            return Err(Error::Dimension(format!(
                "projector expects width {}, got {:?}",
                self.config.d_in,
                t.shape()
            )));
        }
        output_length(t.rows(), &self.config)?;
        let h = self.block1.forward(tape, &self.params, frames, &self.config, mode)?;
        let h = self.block2.forward(tape, &self.params, h, &self.config, mode)?;
        self.head.forward(tape, &self.params, h)
    }

    /// Eval-mode forward returning plain values.
    pub fn project(&self, averaged: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(averaged.clone())?;
        let y = self.forward(&mut tape, x, &mut Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Intermediate widths after each block, for inspection and tests.
    pub fn block_outputs(&self, averaged: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(averaged.clone())?;
        let mut mode = Mode::Eval;
        let h1 = self.block1.forward(&mut tape, &self.params, x, &self.config, &mut mode)?;
        let h2 = self.block2.forward(&mut tape, &self.params, h1, &self.config, &mut mode)?;
        let y = self.head.forward(&mut tape, &self.params, h2)?;
        Ok((tape.value(h1).clone(), tape.value(h2).clone(), tape.value(y).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(data.len(), 2, data.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn averaging_examples() {
        let f = rows(&[[1.0, 1.0], [3.0, 3.0], [5.0, 5.0], [7.0, 7.0]]);
        assert_eq!(average_frames(&f, 1).unwrap(), f);
        assert_eq!(average_frames(&f, 2).unwrap(), rows(&[[2.0, 2.0], [6.0, 6.0]]));
        let f5 = rows(&[[0.0, 0.0], [2.0, 2.0], [4.0, 4.0], [6.0, 6.0], [9.0, -1.0]]);
        let avg = average_frames(&f5, 2).unwrap();
        assert_eq!(avg.rows(), 3);
        assert_eq!(avg.row(2), &[9.0, -1.0]);
        let empty = Tensor::from_rows(0, 2, vec![]).unwrap();
        assert_eq!(average_frames(&empty, 2).unwrap().rows(), 0);
        assert!(average_frames(&f, 0).is_err());
    }

    #[test]
    fn output_length_examples() {
        let cfg = ProjectorConfig::default();
        assert_eq!(output_length(100, &cfg).unwrap(), 25);
        assert_eq!(output_length(12, &cfg).unwrap(), 3);
        assert_eq!(output_length(8, &cfg).unwrap(), 2);
        assert_eq!(cfg.min_input_len(), 4);
        match output_length(3, &cfg) {
            Err(Error::InputLength { len: 3, min: 4 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = ProjectorConfig {
            kernel: 2,
            stride: 2,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "projector.kernel"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ProjectorConfig {
            d_mid: 8,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn too_short_input_reports_minimum() {
        let model = ProjectorModel::new(ProjectorConfig {
            layers_per_block: 1,
            ..Default::default()
        })
        .unwrap();
        let x = Tensor::zeros(&[3, 16]);
        assert!(matches!(model.project(&x), Err(Error::InputLength { min: 4, .. })));
    }
}
