use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechproj_core::autodiff::Tape;
use speechproj_core::backbones::{DecoderConfig, SynthSfm, SynthSfmConfig, ToyDecoder};
use speechproj_core::losses::{stage1_loss, LossWeights};
use speechproj_core::metrics::edit_distance;
use speechproj_core::nn::Mode;
use speechproj_core::projector::{output_length, ProjectorConfig, ProjectorModel};
use speechproj_core::targets::{build_target_from_ids, Vocab};
use speechproj_core::Tensor;

fn projector_forward(c: &mut Criterion) {
    let cfg = ProjectorConfig::default();
    let model = ProjectorModel::new(cfg.clone()).unwrap();
    let mut group = c.benchmark_group("projector_forward");
    for t in [32usize, 64, 128] {
        let x = Tensor::randn(&[t, cfg.d_in], 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64));
        group.bench_with_input(BenchmarkId::from_parameter(t), &x, |b, x| b.iter(|| model.project(black_box(x)).unwrap()));
    }
    group.finish();
}

fn stage1_step(c: &mut Criterion) {
    let cfg = ProjectorConfig::default();
    let mut model = ProjectorModel::new(cfg.clone()).unwrap();
    let table = Tensor::randn(&[255, cfg.d_out], 0.25, &mut ChaCha8Rng::seed_from_u64(1));
    let t = 64;
    let x = Tensor::randn(&[t, cfg.d_in], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let len = output_length(t, &cfg).unwrap();
    let ids: Vec<u32> = (5..5 + len as u32 - 1).collect();
    let target = build_target_from_ids(&ids, &table, len).unwrap();
    let w = LossWeights::new(5.0, 100.0, 0.0, 1e3).unwrap();
    let mut tape = Tape::new();
    c.bench_function("stage1_forward_backward_t64", |b| {
        b.iter(|| {
            tape.reset();
            let xv = tape.constant(x.clone()).unwrap();
            let y = model.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
            let (loss, _) = stage1_loss(&mut tape, y, &target, &w).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_into(&mut model.params);
        })
    });
}

fn greedy_decode(c: &mut Criterion) {
    let sfm = SynthSfm::new(SynthSfmConfig::default(), 255).unwrap();
    let dec = ToyDecoder::new(DecoderConfig::default(), Some(sfm.acoustic_table())).unwrap();
    let ids: Vec<u32> = (10..18).collect();
    let ctx = dec.context(&dec.embed_ids(&ids)).unwrap();
    c.bench_function("greedy_decode_8_words_cap_20", |b| b.iter(|| dec.greedy_decode(black_box(&ctx), 20).unwrap()));
}

fn word_edit_distance(c: &mut Criterion) {
    let vocab = Vocab::synthetic(250).unwrap();
    let a: Vec<&str> = vocab.tokens()[5..105].iter().map(String::as_str).collect();
    let mut b: Vec<&str> = a.clone();
    b.reverse();
    c.bench_function("edit_distance_100x100", |bn| bn.iter(|| edit_distance(black_box(&a), black_box(&b))));
}

criterion_group!(benches, projector_forward, stage1_step, greedy_decode, word_edit_distance);
criterion_main!(benches);
