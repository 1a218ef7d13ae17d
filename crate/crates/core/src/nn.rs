//! Layer building blocks shared by the projector and the toy decoder.

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Forward-pass mode. Dropout only fires in training mode.
pub enum Mode<'a> {
    Eval,
    Train {
        rng: &'a mut dyn RngCore,
        dropout: f64,
    },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = set.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let b = set.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(set, self.w);
        let b = tape.param(set, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gamma: set.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: set.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(set, self.gamma);
        let b = tape.param(set, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Inverted dropout: kept activations are scaled by `1/(1-p)`.
pub fn dropout(tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { dropout, .. } if *dropout <= 0.0 => Ok(x),
        Mode::Train { rng, dropout } => {
            let p = *dropout;
            let keep = 1.0 / (1.0 - p);
            let n = tape.value(x).len();
            let factors = (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, factors)
        }
    }
}

/// Sinusoidal position table, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
            let angle = t as f64 * freq;
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_rows(len, width, data).expect("consistent shape")
}
