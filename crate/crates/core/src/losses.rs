//! Training objectives.
//!
//! ```text
//! L_mse    = α·MSE_word + (10 − α)·MSE_pad
//! L_stage1 = L_mse − γ·L_cos
//! L_stage2 = (1 − σ)·L_ce + σ·L_mse
//! ```
//!
//! Both MSE terms average `(s·(pred − target))²` over masked positions and all
//! dimensions, with `s = mse_scale`. The cosine term averages row cosine
//! similarity over word-masked positions and is never scaled.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::targets::TargetSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub mse_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            gamma: 100.0,
            sigma: 0.9,
            mse_scale: 1e3,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, gamma: f64, sigma: f64, mse_scale: f64) -> Result<Self> {
        let w = Self {
            alpha,
            gamma,
            sigma,
            mse_scale,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=9.0).contains(&self.alpha) {
            return Err(Error::Range(format!("alpha {} outside [1, 9]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Range(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Range(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        if !(self.mse_scale > 0.0 && self.mse_scale.is_finite()) {
            return Err(Error::Range(format!("mse_scale {} must be > 0", self.mse_scale)));
        }
        Ok(())
    }
}

/// Scalar values of every loss component for one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mse_word: f64,
    pub mse_pad: f64,
    pub l_mse: f64,
    pub l_cosine: f64,
    pub l_ce: f64,
    pub total: f64,
    pub word_positions: usize,
    pub pad_positions: usize,
    /// Word rows whose cosine was undefined (zero norm) and counted as 0.
    pub zero_norm: usize,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns; counts are summed.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for p in parts {
            out.mse_word += p.mse_word / n;
            out.mse_pad += p.mse_pad / n;
            out.l_mse += p.l_mse / n;
            out.l_cosine += p.l_cosine / n;
            out.l_ce += p.l_ce / n;
            out.total += p.total / n;
            out.word_positions += p.word_positions;
            out.pad_positions += p.pad_positions;
            out.zero_norm += p.zero_norm;
        }
        out
    }
}

/// Nodes of the MSE part of the objective.
#[derive(Clone, Copy, Debug)]
pub struct MseVars {
    pub mse_word: Var,
    pub mse_pad: Var,
    pub l_mse: Var,
}

fn check_masks(rows: usize, word_mask: &[bool], pad_mask: &[bool]) -> Result<()> {
    if word_mask.len() != rows || pad_mask.len() != rows {
        return Err(Error::Dimension(format!(
            "masks of length {}/{} for {rows} positions",
            word_mask.len(),
            pad_mask.len()
        )));
    }
    if let Some(i) = (0..rows).find(|&i| word_mask[i] == pad_mask[i]) {
        return Err(Error::Dimension(format!("word and pad masks do not partition position {i}")));
    }
    Ok(())
}

/// Split masked MSE. When the pad mask is empty the pad term is 0 and
/// `l_mse = α·mse_word`.
pub fn split_mse(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    word_mask: &[bool],
    pad_mask: &[bool],
    w: &LossWeights,
) -> Result<(MseVars, LossBreakdown)> {
    check_masks(tape.value(pred).rows(), word_mask, pad_mask)?;
    let mse_word = tape.masked_sq_mean(pred, target, word_mask, w.mse_scale)?;
    let mse_pad = tape.masked_sq_mean(pred, target, pad_mask, w.mse_scale)?;
    let pad_positions = pad_mask.iter().filter(|m| **m).count();
    let word_term = tape.scale(mse_word, w.alpha)?;
    let l_mse = if pad_positions == 0 {
        word_term
    } else {
        let pad_term = tape.scale(mse_pad, 10.0 - w.alpha)?;
        tape.add(word_term, pad_term)?
    };
    let b = LossBreakdown {
        mse_word: tape.value(mse_word).item(),
        mse_pad: tape.value(mse_pad).item(),
        l_mse: tape.value(l_mse).item(),
        word_positions: word_mask.iter().filter(|m| **m).count(),
        pad_positions,
        ..Default::default()
    };
    Ok((
        MseVars {
            mse_word,
            mse_pad,
            l_mse,
        },
        b,
    ))
}

/// Mean cosine similarity over word-masked rows, plus the zero-norm count.
pub fn cosine_term(tape: &mut Tape, pred: Var, target: &Tensor, word_mask: &[bool]) -> Result<(Var, usize)> {
    if !word_mask.iter().any(|m| *m) {
        return Err(Error::Argument("cosine term needs a non-empty word mask".into()));
    }
    tape.masked_cosine(pred, target, word_mask)
}

fn check_len(tape: &Tape, pred: Var, tgt: &TargetSequence) -> Result<()> {
    let shape = tape.value(pred).shape();
    if shape != tgt.embeddings.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            shape,
            tgt.embeddings.shape()
        )));
    }
    Ok(())
}

/// `L_mse − γ·L_cos`.
pub fn stage1_loss(tape: &mut Tape, pred: Var, tgt: &TargetSequence, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    check_len(tape, pred, tgt)?;
    let (mse, mut b) = split_mse(tape, pred, &tgt.embeddings, &tgt.word_mask, &tgt.pad_mask, w)?;
    let (cos, zero) = cosine_term(tape, pred, &tgt.embeddings, &tgt.word_mask)?;
    let neg = tape.scale(cos, -w.gamma)?;
    let total = tape.add(mse.l_mse, neg)?;
    b.l_cosine = tape.value(cos).item();
    b.zero_norm = zero;
    b.total = tape.value(total).item();
    Ok((total, b))
}

/// `(1 − σ)·L_ce + σ·L_mse`, with `ce` already on the tape.
pub fn stage2_loss(
    tape: &mut Tape,
    ce: Var,
    pred: Var,
    tgt: &TargetSequence,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    check_len(tape, pred, tgt)?;
    if tape.value(ce).len() != 1 {
        return Err(Error::Dimension("cross entropy must be a scalar".into()));
    }
    let (mse, mut b) = split_mse(tape, pred, &tgt.embeddings, &tgt.word_mask, &tgt.pad_mask, w)?;
    let ce_term = tape.scale(ce, 1.0 - w.sigma)?;
    let mse_term = tape.scale(mse.l_mse, w.sigma)?;
    let total = tape.add(ce_term, mse_term)?;
    b.l_ce = tape.value(ce).item();
    b.total = tape.value(total).item();
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_split(diff: f64, alpha: f64, scale: f64) -> LossBreakdown {
        let target = Tensor::zeros(&[4, 2]);
        let pred = Tensor::filled(&[4, 2], diff);
        let mut tape = Tape::new();
        let p = tape.input(pred).unwrap();
        let w = LossWeights::new(alpha, 0.0, 0.0, scale).unwrap();
        let word = [true, true, true, false];
        let pad = [false, false, false, true];
        split_mse(&mut tape, p, &target, &word, &pad, &w).unwrap().1
    }

    #[test]
    fn unit_error_is_alpha_invariant() {
        let b = eval_split(1.0, 5.0, 1.0);
        assert_eq!((b.mse_word, b.mse_pad, b.l_mse), (1.0, 1.0, 10.0));
        assert_eq!(eval_split(1.0, 9.0, 1.0).l_mse, 10.0);
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        assert!(LossWeights::new(0.5, 1.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(5.0, 1.0, 1.5, 1.0).is_err());
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::zeros(&[2, 2])).unwrap();
        let w = LossWeights::default();
        let t = Tensor::zeros(&[2, 2]);
        let r = split_mse(&mut tape, p, &t, &[true, true], &[false, true], &w);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
