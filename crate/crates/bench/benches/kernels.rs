use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dto_bench::{sequences, toy_model};
use dto_core::tensor::matmul;
use dto_core::train::answer_nll_loss;
use dto_core::{delta_scores, pivot, Graph, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 17) as f64 * 0.1).collect()).unwrap();
        let b = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 13) as f64 * 0.2).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let vocab = 614;
    let model = toy_model(vocab);
    let seqs = sequences(8, 18, vocab);
    let batch: Vec<_> = seqs.iter().collect();
    let ids: Vec<&[u32]> = seqs.iter().map(|s| s.ids()).collect();
    c.bench_function("forward_batch8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            model.forward(&mut g, black_box(&ids)).unwrap()
        })
    });
    c.bench_function("forward_backward_batch8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &ids).unwrap();
            let (loss, _) = answer_nll_loss(&mut g, &fwd, &batch, vocab).unwrap();
            g.backward(loss).unwrap()
        })
    });
}

fn bench_delta(c: &mut Criterion) {
    let vocab = 614;
    let model = toy_model(vocab);
    let seq = &sequences(1, 18, vocab)[0];
    let q = pivot(seq.len(), 0.25).unwrap();
    c.bench_function("delta_scores_len18", |bench| {
        bench.iter(|| delta_scores(&model, black_box(seq), q, 7).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_forward_backward, bench_delta);
criterion_main!(benches);
