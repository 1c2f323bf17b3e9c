//! Parallel vs sequential timings of the hot kernels.
//!
//! Each benchmark runs twice, once with the rayon path enabled and once with
//! `par::set_enabled(false)`. Build with `--no-default-features` to measure
//! the crate without rayon compiled in at all.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use laconv::kernels::{self, ConvGeom};
use laconv::laconv::{Generation, LaConvBlock, LaConvSpec};
use laconv::linalg::gemm;
use laconv::params::{ParamStore, Session};
use laconv::text::TextVars;
use laconv::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dyconv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // toy stage 2 at batch 32
    let geom = ConvGeom { batch: 32, height: 16, width: 16, channels: 32, kernel: 5, groups: 8 };
    let x = random(geom.feature_len(), &mut rng);
    let w = random(geom.kernel_len(), &mut rng);
    let dy = random(geom.feature_len(), &mut rng);
    let mut out = vec![0.0f32; geom.feature_len()];
    let mut dw = vec![0.0f32; geom.kernel_len()];
    let mut g = c.benchmark_group("dyconv");
    g.throughput(Throughput::Elements(geom.macs() as u64));
    for (mode, on) in MODES {
        par::set_enabled(on);
        g.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| kernels::dyconv_forward(geom, &x, &w, &mut out))
        });
        g.bench_function(BenchmarkId::new("backward_input", mode), |b| {
            b.iter(|| kernels::dyconv_backward_input(geom, &dy, &w, &mut out))
        });
        g.bench_function(BenchmarkId::new("backward_kernels", mode), |b| {
            b.iter(|| kernels::dyconv_backward_kernels(geom, &dy, &x, &mut dw))
        });
    }
    par::set_enabled(true);
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("matmul");
    // block MLP input projections of toy stages 1 and 3 at batch 32
    for (m, k, n) in [(32 * 1024, 16, 64), (32 * 64, 64, 256)] {
        let a = random(m * k, &mut rng);
        let b = random(k * n, &mut rng);
        let mut out = vec![0.0f32; m * n];
        g.throughput(Throughput::Elements((m * k * n) as u64));
        for (mode, on) in MODES {
            par::set_enabled(on);
            g.bench_function(BenchmarkId::new(format!("{m}x{k}x{n}"), mode), |bch| {
                bch.iter(|| gemm(false, false, m, n, k, &a, &b, false, &mut out))
            });
        }
    }
    par::set_enabled(true);
    g.finish();
}

fn block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = LaConvSpec {
        dim: 32,
        text_dim: 64,
        kernel: 5,
        groups: 8,
        packing: 2,
        heads: 2,
        generation: Generation::Conditioned,
    };
    let block = LaConvBlock::new("b", spec).unwrap();
    let mut store = ParamStore::<f32>::new();
    block.init(&mut store, &mut rng).unwrap();
    let (batch, words) = (16, 6);
    let x = Tensor::new([batch, 16, 16, 32], random(batch * 16 * 16 * 32, &mut rng)).unwrap();
    let y = Tensor::new([batch, words, 64], random(batch * words * 64, &mut rng)).unwrap();
    let mask = vec![true; batch * words];
    let mut g = c.benchmark_group("block");
    for (mode, on) in MODES {
        par::set_enabled(on);
        g.bench_function(BenchmarkId::new("forward_backward", mode), |b| {
            b.iter(|| {
                let mut s = Session::new(&mut store, true);
                let xv = s.graph.constant(x.clone());
                let yv = s.graph.constant(y.clone());
                let text = TextVars::from_features(&mut s.graph, yv, &mask).unwrap();
                let out = block.forward(&mut s, xv, &text).unwrap();
                let loss = s.graph.sum(out);
                s.backward(loss).unwrap();
            })
        });
    }
    par::set_enabled(true);
    g.finish();
}

criterion_group!(benches, dyconv, matmul, block);
criterion_main!(benches);
