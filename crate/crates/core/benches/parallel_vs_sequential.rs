//! Parallel vs sequential throughput on the three data-parallel inner
//! loops: per-example batch gradients, greedy-decode split evaluation,
//! and finite-difference gradient probing.
//!
//! `map_indexed` is rayon-backed under the default `parallel` feature and
//! sequential without it; `map_sequential` is the explicit baseline, so
//! building with `--no-default-features` shows the two curves coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use peft_lab::model::{Model, ModelConfig, BOS_ID, EOS_ID};
use peft_lab::parallel;
use peft_lab::peft::{inject, PeftMethod};
use peft_lab::tasks::{gen_task, Split, TaskKind};
use peft_lab::tensor::Tensor;
use peft_lab::TokenId;
use std::hint::black_box;

fn bench_model() -> Model<f32> {
    let mut model = Model::new(ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 32,
        max_seq_len: 12,
        seed: 7,
    })
    .unwrap();
    inject(&mut model, PeftMethod::Full, 0).unwrap();
    model
}

fn with_bos_eos(tgt: &[TokenId]) -> Vec<TokenId> {
    let mut out = vec![BOS_ID];
    out.extend_from_slice(tgt);
    out.push(EOS_ID);
    out
}

fn batch_gradients(c: &mut Criterion) {
    let model = bench_model();
    let task = gen_task(TaskKind::Copy, 3, 32, 8, 8, 32, (3, 7), 1.0).unwrap();
    let examples = task.seq_split(Split::Train).unwrap();
    let n = 16usize;

    let one = |i: usize| {
        let ex = &examples[i % examples.len()];
        let graph = model
            .seq2seq_loss_graph(&ex.src, &with_bos_eos(&ex.tgt))
            .unwrap();
        graph.backward().unwrap()
    };

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
        b.iter(|| black_box(parallel::map_indexed(n, one)))
    });
    group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| black_box(parallel::map_sequential(n, one)))
    });
    group.finish();
}

fn split_evaluation(c: &mut Criterion) {
    let model = bench_model();
    let task = gen_task(TaskKind::Copy, 5, 8, 32, 8, 32, (3, 7), 1.0).unwrap();
    let dev = task.seq_split(Split::Dev).unwrap();

    let decode = |i: usize| model.greedy_decode(&dev[i].src, 11).unwrap();

    let mut group = c.benchmark_group("split_evaluation");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(parallel::map_indexed(dev.len(), decode)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(parallel::map_sequential(dev.len(), decode)))
    });
    group.finish();
}

fn finite_difference(c: &mut Criterion) {
    let model: Model<f64> = Model::new(ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 16,
        max_seq_len: 8,
        seed: 9,
    })
    .unwrap();
    let src = [4u32, 5, 6];
    let tgt = [BOS_ID, 7, 8, EOS_ID];
    let probe = model.params.get("enc.0.attn.q").unwrap().clone();
    let h = 1e-3f64;

    let coord = |i: usize| {
        let eval = |t: &Tensor<f64>| {
            let mut m = model.clone();
            *m.params.get_mut("enc.0.attn.q").unwrap() = t.clone();
            m.seq2seq_loss(&src, &tgt).unwrap()
        };
        let mut plus = probe.clone();
        plus.data_mut()[i] += h;
        let mut minus = probe.clone();
        minus.data_mut()[i] += -h;
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    };
    let n = probe.numel().min(128);

    let mut group = c.benchmark_group("finite_difference");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(parallel::map_indexed(n, coord)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(parallel::map_sequential(n, coord)))
    });
    group.finish();
}

criterion_group!(
    benches,
    batch_gradients,
    split_evaluation,
    finite_difference
);
criterion_main!(benches);
