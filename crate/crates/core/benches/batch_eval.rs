use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuralcmf::field::{eval_points, FieldParams};
use neuralcmf::losses::{evaluate, Batch, LossConfig, LossTerms, LossWeights, Want};
use neuralcmf::parallel::Exec;

fn batch(n: usize, period: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let frames = (0..n).map(|_| rng.random_range(0..period as i64)).collect();
    let targets = (0..n).map(|_| rng.random()).collect();
    Batch::new(pos, frames, targets, 8).unwrap()
}

fn params() -> FieldParams<f32> {
    let mut p = FieldParams::<f32>::init(1);
    p.randomize_heads(&mut ChaCha8Rng::seed_from_u64(2), 0.05);
    p
}

fn inference(c: &mut Criterion) {
    let p = params();
    let n = 16_384;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let ts: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut g = c.benchmark_group("eval_points");
    g.throughput(Throughput::Elements(n as u64));
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| eval_points(&p, &pts, &ts, exec))
        });
    }
    g.finish();
}

fn loss_and_gradient(c: &mut Criterion) {
    let p = params();
    let period = 8;
    let b = batch(4096, period);
    let cfg = LossConfig {
        weights: LossWeights::default(),
        terms: LossTerms::default(),
        period,
    };
    let mut g = c.benchmark_group("training_step_loss");
    g.sample_size(10);
    g.throughput(Throughput::Elements(4096));
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |bn| {
            bn.iter(|| evaluate(&p, &b, &cfg, Want::PARAMS, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, inference, loss_and_gradient);
criterion_main!(benches);
