//! Loop-based reference evaluations of the objectives.

use speechproj_core::autodiff::Tape;
use speechproj_core::losses::{cosine_term, split_mse, stage1_loss, stage2_loss, LossWeights};
use speechproj_core::targets::TargetSequence;
use speechproj_core::Tensor;

pub struct Fixture {
    pub pred: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    /// Word rows are `0..=n`; the rest are pads.
    pub n: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub scale: f64,
    pub ce: f64,
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn masked_mean(f: &Fixture, rows: impl Iterator<Item = usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in rows {
        for (p, t) in f.pred[r].iter().zip(&f.target[r]) {
            let d = f.scale * p - f.scale * t;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub struct Expected {
    pub mse_word: f64,
    pub mse_pad: f64,
    pub l_mse: f64,
    pub cosine: f64,
    pub stage1: f64,
    pub stage2: f64,
}

pub fn by_hand(f: &Fixture) -> Expected {
    let len = f.pred.len();
    let mse_word = masked_mean(f, 0..=f.n);
    let mse_pad = masked_mean(f, f.n + 1..len);
    let l_mse = if f.n + 1 == len {
        f.alpha * mse_word
    } else {
        f.alpha * mse_word + (10.0 - f.alpha) * mse_pad
    };
    let mut cos = 0.0;
    for r in 0..=f.n {
        let dot: f64 = f.pred[r].iter().zip(&f.target[r]).map(|(a, b)| a * b).sum();
        let na = f.pred[r].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = f.target[r].iter().map(|b| b * b).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            cos += dot / (na * nb);
        }
    }
    let cosine = cos / (f.n + 1) as f64;
    Expected {
        mse_word,
        mse_pad,
        l_mse,
        cosine,
        stage1: l_mse - f.gamma * cosine,
        stage2: (1.0 - f.sigma) * f.ce + f.sigma * l_mse,
    }
}

pub fn target_seq(f: &Fixture) -> TargetSequence {
    let len = f.target.len();
    TargetSequence {
        token_ids: (0..f.n as u32).map(|i| i + 5).collect(),
        embeddings: tensor(&f.target),
        first_pad_index: f.n,
        word_mask: (0..len).map(|i| i <= f.n).collect(),
        pad_mask: (0..len).map(|i| i > f.n).collect(),
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * b.abs().max(1.0)
}

/// Twelve fixtures with varied shapes, masks and weights. Entries are
/// small rationals so the hand sums are exact enough to compare at 1e-10.
pub fn fixtures() -> Vec<Fixture> {
    let grid = |rows: usize, cols: usize, a: i64, b: i64, c: i64| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|k| (((r as i64 * a + k as i64 * b + c) % 17) - 8) as f64 / 8.0)
                    .collect()
            })
            .collect()
    };
    let shapes = [
        (4, 2, 2), (5, 3, 1), (6, 4, 3), (3, 2, 2), (8, 4, 3), (7, 5, 0),
        (4, 3, 1), (10, 2, 6), (6, 6, 2), (5, 4, 4), (9, 3, 4), (2, 8, 0),
    ];
    let alphas = [5.0, 9.0, 1.0, 3.5, 7.0, 5.0, 2.0, 8.0, 6.0, 4.0, 5.0, 9.0];
    let gammas = [100.0, 0.0, 1.0, 50.0, 100.0, 3.0, 0.5, 10.0, 100.0, 0.0, 25.0, 7.0];
    let sigmas = [0.9, 0.0, 1.0, 0.85, 0.5, 0.9, 0.95, 0.0, 1.0, 0.9, 0.3, 0.81];
    let scales = [1.0, 1e3, 1.0, 10.0, 1e3, 2.0, 1.0, 1e3, 0.5, 1.0, 100.0, 1e3];
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(l, d, n))| Fixture {
            pred: grid(l, d, 3 + i as i64, 5, i as i64),
            target: grid(l, d, 7, 2 + i as i64, 11),
            n,
            alpha: alphas[i],
            gamma: gammas[i],
            sigma: sigmas[i],
            scale: scales[i],
            ce: 0.25 * (i + 1) as f64,
        })
        .collect()
}

/// Every disagreement between the implementation and the hand sums.
pub fn mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    let mut want_close = |ok: bool, msg: String| {
        if !ok {
            bad.push(msg);
        }
    };
    let fx = fixtures();
    for (i, f) in fx.iter().enumerate() {
        let want = by_hand(f);
        let w = LossWeights::new(f.alpha, f.gamma, f.sigma, f.scale).unwrap();
        let tgt = target_seq(f);

        let mut tape = Tape::new();
        let p = tape.input(tensor(&f.pred)).unwrap();
        let (_, b) = split_mse(&mut tape, p, &tgt.embeddings, &tgt.word_mask, &tgt.pad_mask, &w).unwrap();
        want_close(close(b.mse_word, want.mse_word), format!("fixture {i}: mse_word {} vs {}", b.mse_word, want.mse_word));
        want_close(close(b.mse_pad, want.mse_pad), format!("fixture {i}: mse_pad {} vs {}", b.mse_pad, want.mse_pad));
        want_close(close(b.l_mse, want.l_mse), format!("fixture {i}: l_mse {} vs {}", b.l_mse, want.l_mse));

        let (cos, _) = cosine_term(&mut tape, p, &tgt.embeddings, &tgt.word_mask).unwrap();
        want_close(close(tape.value(cos).item(), want.cosine), format!("fixture {i}: cosine"));

        let mut tape = Tape::new();
        let p = tape.input(tensor(&f.pred)).unwrap();
        let (_, b1) = stage1_loss(&mut tape, p, &tgt, &w).unwrap();
        want_close(close(b1.total, want.stage1), format!("fixture {i}: stage1 {} vs {}", b1.total, want.stage1));

        let mut tape = Tape::new();
        let p = tape.input(tensor(&f.pred)).unwrap();
        let ce = tape.constant(Tensor::scalar(f.ce)).unwrap();
        let (_, b2) = stage2_loss(&mut tape, ce, p, &tgt, &w).unwrap();
        want_close(close(b2.total, want.stage2), format!("fixture {i}: stage2 {} vs {}", b2.total, want.stage2));
    }
    bad
}
