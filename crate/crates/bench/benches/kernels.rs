use std::hint::black_box;

use arnet_bench::{caption_model, examples, joint_step, random_vector, HIDDEN};
use arnet_core::arnet::ArnetParams;
use arnet_core::lstm::{LstmParams, LstmState, RegularizerConfig};
use arnet_core::metrics::{MetricsReport, ScoredCorpus};
use arnet_core::seq2seq::model::batch_gradients;
use arnet_core::seq2seq::{beam, greedy, DecoderSession, SearchConfig};
use arnet_core::tensor::{Matrix, RngStream};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matvec(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let (r, k) = (4 * HIDDEN, 2 * HIDDEN);
    let w = Matrix::from_vec(r, k, (0..r * k).map(|_| rng.uniform()).collect()).unwrap();
    let x = random_vector(k, &mut rng);
    let mut out = vec![0.0; r];
    c.bench_function("matvec 512x256", |b| {
        b.iter(|| {
            w.matvec_into(black_box(&x), &mut out);
            black_box(&out);
        })
    });
}

fn lstm_step(c: &mut Criterion) {
    let mut rng = RngStream::new(2);
    let p = LstmParams::init(HIDDEN, HIDDEN, 0.08, 1.0, &mut rng).unwrap();
    let x = random_vector(HIDDEN, &mut rng);
    let s = LstmState::zeros(HIDDEN);
    let dh = random_vector(HIDDEN, &mut rng);
    let dc = random_vector(HIDDEN, &mut rng);
    c.bench_function("lstm step forward", |b| b.iter(|| p.step(black_box(&x), &s).unwrap()));
    let (_, cache) = p.step(&x, &s).unwrap();
    c.bench_function("lstm step backward", |b| {
        b.iter(|| p.step_backward(black_box(&cache), &dh, &dc).unwrap())
    });
}

fn arnet_pass(c: &mut Criterion) {
    let mut rng = RngStream::new(3);
    let p = ArnetParams::init(HIDDEN, HIDDEN, 0.08, 1.0, &mut rng).unwrap();
    let hs: Vec<_> = (0..16).map(|_| random_vector(HIDDEN, &mut rng)).collect();
    c.bench_function("arnet 16-step pass", |b| b.iter(|| p.sequence_pass(black_box(&hs)).unwrap()));
}

fn seq2seq_batch(c: &mut Criterion) {
    let exs = examples(8, 4).unwrap();
    let batch: Vec<_> = exs.iter().collect();
    let mut g = c.benchmark_group("seq2seq batch of 8");
    g.sample_size(10);
    for attention in [false, true] {
        let m = caption_model(HIDDEN, attention, 5).unwrap();
        let mut grads = m.zeros_like();
        for lambda in [0.0, 0.01] {
            let opts = joint_step(lambda);
            let id = BenchmarkId::new(if attention { "attentive" } else { "plain" }, lambda);
            g.bench_with_input(id, &opts, |b, opts| {
                b.iter(|| {
                    let mut rng = RngStream::new(0);
                    batch_gradients(&m, &batch, opts, &mut rng, &mut grads).unwrap()
                })
            });
        }
    }
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let m = caption_model(HIDDEN, true, 6).unwrap();
    let ex = &examples(1, 7).unwrap()[0];
    let reg = RegularizerConfig::none();
    let session = DecoderSession::new(&m, &ex.source, &reg).unwrap();
    let mut g = c.benchmark_group("decode 16 tokens");
    g.bench_function("greedy", |b| {
        b.iter(|| greedy(&session, &SearchConfig::new(1, 16)).unwrap())
    });
    for k in [3, 5] {
        g.bench_with_input(BenchmarkId::new("beam", k), &k, |b, &k| {
            b.iter(|| beam(&session, &SearchConfig::new(k, 16)).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = RngStream::new(8);
    let mut sentence = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.below(50) as u32).collect() };
    let hyps: Vec<_> = (0..1000).map(|_| sentence(12)).collect();
    let refs: Vec<_> = (0..1000).map(|_| sentence(14)).collect();
    let corpus = ScoredCorpus::single(hyps, refs).unwrap();
    c.bench_function("bleu + rouge-l, 1000 captions", |b| {
        b.iter(|| MetricsReport::compute(black_box(&corpus)).unwrap())
    });
}

criterion_group!(benches, matvec, lstm_step, arnet_pass, seq2seq_batch, decoding, metrics);
criterion_main!(benches);
