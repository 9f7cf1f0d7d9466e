use chimera_core::contrastive::{nt_xent, NegativeConvention};
use chimera_core::data::{inject_symmetric, make_blobs};
use chimera_core::detector::{fit_gmm_em, EmSettings};
use chimera_core::model::{ModelParams, OptimizerState};
use chimera_core::pipeline::{pretrain_epoch, TrainConfig};
use chimera_core::rng::{derived, seeded};
use chimera_core::{Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let (a, b) = (normal(n, 64, 1), normal(64, 64, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
                black_box(t.matmul(va, vb).unwrap());
            })
        });
    }
    g.finish();
}

fn nt_xent_forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("nt_xent_fwd_bwd");
    for n in [32, 64, 128] {
        let (a, b) = (normal(n, 16, 3), normal(n, 16, 4));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (va, vb) = (t.param(a.clone()), t.param(b.clone()));
                let (na, nb) = (t.l2_normalize_rows(va).unwrap(), t.l2_normalize_rows(vb).unwrap());
                let l = nt_xent(&mut t, na, nb, 0.5, NegativeConvention::Symmetric).unwrap();
                t.backward(l).unwrap();
                black_box(t.grad(va));
            })
        });
    }
    g.finish();
}

fn gmm_fit(c: &mut Criterion) {
    let mut rng = derived(5, &[0]);
    let losses: Vec<f64> = (0..2000)
        .map(|_| {
            if rng.random_bool(0.4) {
                rng.random_range(1.5..2.5)
            } else {
                rng.random_range(0.0..0.3)
            }
        })
        .collect();
    c.bench_function("gmm_fit_2000", |bench| {
        bench.iter(|| black_box(fit_gmm_em(&losses, EmSettings::default()).unwrap()))
    });
}

fn pretrain_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    // exactly one step of 2 * pretrain_batch samples per epoch
    let ds = inject_symmetric(&make_blobs(8, 16, 32, 3.0, 6).unwrap(), 0.5, 7).unwrap();
    let net = ModelParams::init_seeded(&cfg.architecture_for(&ds).unwrap(), 8).unwrap();
    let o = &cfg.optimizer;
    let opt = OptimizerState::new(&net, o.pretrain_learning_rate, o.momentum, o.weight_decay).unwrap();
    c.bench_function("pretrain_step_b64", |bench| {
        bench.iter_batched(
            || (net.clone(), opt.clone()),
            |(mut n, mut s)| black_box(pretrain_epoch(&mut n, &mut s, &ds, &cfg, &mut seeded(9)).unwrap()),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matmul, nt_xent_forward_backward, gmm_fit, pretrain_step);
criterion_main!(benches);
