//! Analytic gradients against central finite differences (h = 1e-5, f64).
//!
//! Each check reduces an op's output to a scalar with a fixed random weight
//! tensor, so every output element contributes a distinct amount. The error
//! measure is `‖g_a − g_n‖ / max(‖g_a‖ + ‖g_n‖, 1e-12)` per input tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speechproj_core::autodiff::{Tape, Var};
use speechproj_core::losses::{stage1_loss, stage2_loss, LossWeights};
use speechproj_core::nn::Mode;
use speechproj_core::projector::{ProjectorConfig, ProjectorModel};
use speechproj_core::targets::build_target_from_ids;
use speechproj_core::{Result, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Builds `f` on fresh tapes. If `f` returns a non-scalar, it is reduced by
/// a fixed weighted sum. Returns the worst relative error over inputs.
pub fn check<F>(seed: u64, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut weights: Option<Tensor> = None;
    let mut eval = |vals: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            let shape = tape.value(out).shape().to_vec();
            let w = weights.get_or_insert_with(|| Tensor::randn(&shape, 1.0, &mut wrng)).clone();
            let w = tape.constant(w).unwrap();
            let m = tape.mul(out, w).unwrap();
            tape.sum(m).unwrap()
        };
        let value = tape.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Largest error of `g` over the standard seeds.
pub fn worst<G>(mut g: G) -> f64
where
    G: FnMut(u64, &mut ChaCha8Rng) -> f64,
{
    (0..SEEDS)
        .map(|seed| g(seed, &mut ChaCha8Rng::seed_from_u64(seed)))
        .fold(0.0, f64::max)
}

pub fn over_seeds<G>(name: &str, mut g: G)
where
    G: FnMut(u64, &mut ChaCha8Rng) -> f64,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = g(seed, &mut rng);
        assert!(e < TOL, "{name}: seed {seed} relative error {e:e}");
    }
}

pub fn random_target(r: &mut ChaCha8Rng, len: usize, n: usize, d: usize) -> (Tensor, speechproj_core::targets::TargetSequence) {
    let table = rand_tensor(r, &[7, d]);
    let ids: Vec<u32> = (0..n).map(|_| r.random_range(5..7)).collect();
    let tgt = build_target_from_ids(&ids, &table, len).unwrap();
    (table, tgt)
}

pub type SeedCheck = fn(u64, &mut ChaCha8Rng) -> f64;

/// One check per loss: the masked primitives and both stage objectives.
pub fn loss_checks() -> Vec<(&'static str, SeedCheck)> {
    vec![
        ("masked_sq_mean", |s, r| {
            let (pred, target) = (rand_tensor(r, &[4, 3]), rand_tensor(r, &[4, 3]));
            let mask = [true, false, true, true];
            check(s, &[pred], |t, v| t.masked_sq_mean(v[0], &target, &mask, 3.0))
        }),
        ("masked_cosine", |s, r| {
            let (pred, target) = (rand_tensor(r, &[4, 3]), rand_tensor(r, &[4, 3]));
            let mask = [true, true, false, true];
            check(s, &[pred], |t, v| Ok(t.masked_cosine(v[0], &target, &mask)?.0))
        }),
        ("stage1", |s, r| {
            let (_, tgt) = random_target(r, 3, 1, 4);
            let w = LossWeights::new(r.random_range(1.0..9.0), r.random_range(0.0..5.0), 0.0, 0.5).unwrap();
            check(s, &[rand_tensor(r, &[3, 4])], |t, v| Ok(stage1_loss(t, v[0], &tgt, &w)?.0))
        }),
        ("stage2", |s, r| {
            let (_, tgt) = random_target(r, 5, 2, 3);
            let w = LossWeights::new(5.0, 100.0, r.random_range(0.0..1.0), 0.5).unwrap();
            let logits = rand_tensor(r, &[3, 6]);
            check(s, &[rand_tensor(r, &[5, 3]), logits], |t, v| {
                let ce = t.cross_entropy(v[1], &[1, 4, 2])?;
                Ok(stage2_loss(t, ce, v[0], &tgt, &w)?.0)
            })
        }),
    ]
}

/// Worst sampled relative error over every projector parameter tensor for
/// one seed. Entries whose analytic and numeric values are both below 1e-9
/// are skipped.
pub fn projector_worst(seed: u64) -> f64 {
    let cfg = ProjectorConfig {
        d_in: 4,
        d_mid: 4,
        d_out: 8,
        layers_per_block: 1,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        ..Default::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let model = ProjectorModel::new(ProjectorConfig {
        init_seed: seed,
        ..cfg.clone()
    })
    .unwrap();
    let x = rand_tensor(&mut r, &[12 + seed as usize % 4, 4]);
    let len = speechproj_core::projector::output_length(x.rows(), &cfg).unwrap();
    let (_, tgt) = random_target(&mut r, len, len - 1, 8);
    let w = LossWeights::new(5.0, 2.0, 0.0, 1.0).unwrap();
    let loss_of = |m: &ProjectorModel| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = m.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
        let (l, _) = stage1_loss(&mut tape, y, &tgt, &w).unwrap();
        tape.value(l).item()
    };
    let mut trained = model.clone();
    {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = trained.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
        let (l, _) = stage1_loss(&mut tape, y, &tgt, &w).unwrap();
        tape.backward(l).unwrap();
        tape.accumulate_into(&mut trained.params);
    }
    let names: Vec<String> = trained.params.iter().map(|p| p.name.clone()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let id = trained.params.find(&name).unwrap();
        let grad = trained.params.get(id).grad.clone().unwrap();
        let n = grad.len();
        let picks: Vec<usize> = (0..n.min(4)).map(|_| r.random_range(0..n)).collect();
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &j in &picks {
            let mut plus = model.clone();
            plus.params.get_mut(id).value.data_mut()[j] += H;
            let mut minus = model.clone();
            minus.params.get_mut(id).value.data_mut()[j] -= H;
            num.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * H));
            a.push(grad.data()[j]);
        }
        let scale: f64 = a.iter().chain(&num).map(|v| v.abs()).fold(0.0, f64::max);
        if scale >= 1e-9 {
            worst = worst.max(rel_err(&a, &num));
        }
    }
    worst
}
