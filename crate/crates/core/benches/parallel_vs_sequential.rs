use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use distillforge::cli::{pipeline, RunConfig};
use distillforge::diffnet::{hypergrad, unroll_inner, Dtype, InnerData, InnerLabels, Mat, ParamVector};
use distillforge::evalharness::evaluate;
use distillforge::exec::{rng_from, set_parallel};
use rand::Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = rng_from(seed);
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

fn matmul(c: &mut Criterion) {
    let a = random_mat(256, 256, 1);
    let b = random_mat(256, 256, 2);
    let mut group = c.benchmark_group("matmul_256");
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| a.matmul(&b)));
    }
    group.finish();
    set_parallel(true);
}

fn toy() -> (RunConfig, pipeline::ToyData) {
    let cfg = RunConfig::default();
    let data = pipeline::build_data(&cfg).unwrap();
    (cfg, data)
}

fn eval_seeds(c: &mut Criterion) {
    let (mut cfg, data) = toy();
    cfg.eval_epochs = 50;
    let rows: Vec<usize> = (0..cfg.classes)
        .flat_map(|k| (0..cfg.ipc).map(move |i| k * cfg.samples_per_class + i))
        .collect();
    let images = data.train.inputs.select_rows(&rows);
    let eval_cfg = cfg.eval_config();
    let mut group = c.benchmark_group("evaluate_5_seeds");
    group.sample_size(10);
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| evaluate(&images, cfg.classes, cfg.ipc, &data.test, &eval_cfg).unwrap())
        });
    }
    group.finish();
    set_parallel(true);
}

fn hypergradient(c: &mut Criterion) {
    let (cfg, data) = toy();
    let net = pipeline::network(&cfg).unwrap();
    let mut rng = rng_from(3);
    let theta = net.init_params(&mut rng, Dtype::Double);
    let images = data
        .train
        .inputs
        .select_rows(&(0..12).map(|i| i * 33).collect::<Vec<_>>());
    let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
    let inner = InnerData {
        images: &images,
        labels: InnerLabels::Hard(&labels),
        alpha: cfg.expert_lr,
        step_alpha: None,
        batch_size: usize::MAX,
    };
    let d_outer = ParamVector::new(
        (0..net.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Dtype::Double,
    );
    let mut group = c.benchmark_group("unroll_and_hypergrad_N10");
    group.sample_size(20);
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let (_, tape) = unroll_inner(&theta, &inner, cfg.n_steps, &net, &mut rng_from(0)).unwrap();
                hypergrad(&tape, &d_outer, &inner, &net).unwrap()
            })
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, matmul, eval_seeds, hypergradient);
criterion_main!(benches);
