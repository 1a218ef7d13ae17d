//! Loss values against direct loop-based evaluations of the objectives.

mod common;

use common::oracle::{fixtures, mismatches, target_seq, tensor, Fixture};
use speechproj_core::autodiff::Tape;
use speechproj_core::losses::{cosine_term, split_mse, stage1_loss, stage2_loss, LossWeights};
use speechproj_core::Tensor;

#[test]
fn split_mse_cosine_and_composites_match_hand_sums() {
    assert!(fixtures().len() >= 10);
    let bad = mismatches();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn worked_examples() {
    // D=2, L=4, three word rows, one pad row, unit error everywhere.
    let target = vec![vec![0.0, 0.0]; 4];
    let pred = vec![vec![1.0, 1.0]; 4];
    for (alpha, expected) in [(5.0, 10.0), (9.0, 10.0)] {
        let f = Fixture { pred: pred.clone(), target: target.clone(), n: 2, alpha, gamma: 0.0, sigma: 0.9, scale: 1.0, ce: 0.0 };
        let w = LossWeights::new(alpha, 0.0, 0.9, 1.0).unwrap();
        let tgt = target_seq(&f);
        let mut tape = Tape::new();
        let p = tape.input(tensor(&f.pred)).unwrap();
        let (_, b) = split_mse(&mut tape, p, &tgt.embeddings, &tgt.word_mask, &tgt.pad_mask, &w).unwrap();
        assert_eq!((b.mse_word, b.mse_pad, b.l_mse), (1.0, 1.0, expected));
    }

    // A perfect prediction leaves only the cosine reward: 0 − 100·1.
    let rows = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.25, 4.0]];
    let f = Fixture { pred: rows.clone(), target: rows, n: 1, alpha: 5.0, gamma: 100.0, sigma: 0.9, scale: 1e3, ce: 0.0 };
    let tgt = target_seq(&f);
    let mut tape = Tape::new();
    let p = tape.input(tensor(&f.pred)).unwrap();
    let (_, b) = stage1_loss(&mut tape, p, &tgt, &LossWeights::new(5.0, 100.0, 0.9, 1e3).unwrap()).unwrap();
    assert_eq!(b.l_mse, 0.0);
    assert!((b.total + 100.0).abs() < 1e-12, "{}", b.total);

    // σ = 0.9, CE = 2, L_mse = 4 gives 0.1·2 + 0.9·4.
    let f = Fixture {
        pred: vec![vec![0.8f64.sqrt()], vec![0.0]],
        target: vec![vec![0.0], vec![0.0]],
        n: 0,
        alpha: 5.0,
        gamma: 0.0,
        sigma: 0.9,
        scale: 1.0,
        ce: 2.0,
    };
    let tgt = target_seq(&f);
    let mut tape = Tape::new();
    let p = tape.input(tensor(&f.pred)).unwrap();
    let ce = tape.constant(Tensor::scalar(2.0)).unwrap();
    let (_, b) = stage2_loss(&mut tape, ce, p, &tgt, &LossWeights::new(5.0, 0.0, 0.9, 1.0).unwrap()).unwrap();
    assert!((b.l_mse - 4.0).abs() < 1e-12 && (b.total - 3.8).abs() < 1e-12, "{b:?}");
}

#[test]
fn cosine_boundary_values() {
    let a = vec![vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]];
    let neg: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let ortho = vec![vec![2.0, -1.0, 0.0], vec![0.0, 1.0, 0.0]];
    let zero = vec![vec![0.0; 3], vec![0.0; 3]];
    let mask = [true, true];
    let run = |p: &Vec<Vec<f64>>| {
        let mut tape = Tape::new();
        let v = tape.input(tensor(p)).unwrap();
        let (c, z) = cosine_term(&mut tape, v, &tensor(&a), &mask).unwrap();
        (tape.value(c).item(), z)
    };
    assert!((run(&a).0 - 1.0).abs() < 1e-12);
    assert!((run(&neg).0 + 1.0).abs() < 1e-12);
    assert!(run(&ortho).0.abs() < 1e-12);
    assert_eq!(run(&zero), (0.0, 2));
}

#[test]
fn sigma_zero_is_pure_cross_entropy() {
    let f = &fixtures()[4];
    let tgt = target_seq(f);
    let mut tape = Tape::new();
    let p = tape.input(tensor(&f.pred)).unwrap();
    let ce = tape.constant(Tensor::scalar(1.75)).unwrap();
    let (_, b) = stage2_loss(&mut tape, ce, p, &tgt, &LossWeights::new(5.0, 0.0, 0.0, 1e3).unwrap()).unwrap();
    assert_eq!(b.total, 1.75);
    let mut tape = Tape::new();
    let p = tape.input(tensor(&f.pred)).unwrap();
    let ce = tape.constant(Tensor::scalar(1.75)).unwrap();
    let (_, b) = stage2_loss(&mut tape, ce, p, &tgt, &LossWeights::new(5.0, 0.0, 1.0, 1e3).unwrap()).unwrap();
    assert_eq!(b.total, b.l_mse);
}
