use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use icone::data::{self, GmmSpec};
use icone::losses::diversity::{ortho_hinge, ortho_hinge_dense};
use icone::metrics::{self, LIDAR_DELTA};
use icone::rng;
use icone::train::{self, AdamState, TrainConfig};
use icone::Tensor;

fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "bench");
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|x| x / norm));
    }
    out
}

fn diversity(c: &mut Criterion) {
    let mut g = c.benchmark_group("l_div");
    for n in [128, 1225, 4096] {
        let rows = unit_rows(n, 2, 1);
        g.bench_with_input(BenchmarkId::new("planar_sweep", n), &rows, |b, rows| {
            b.iter(|| ortho_hinge(rows, n, 2, None).unwrap())
        });
        if n <= 1225 {
            g.bench_with_input(BenchmarkId::new("dense", n), &rows, |b, rows| {
                b.iter(|| ortho_hinge_dense(rows, n, 2, None).unwrap())
            });
        }
    }
    let rows = unit_rows(1225, 8, 2);
    g.bench_function("dense_d8/1225", |b| b.iter(|| ortho_hinge(&rows, 1225, 8, None).unwrap()));
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let ds = data::generate(&GmmSpec::default()).unwrap();
    let mut g = c.benchmark_group("train_step");
    for batch in [1, 128] {
        let cfg = TrainConfig { batch_size: batch, ..Default::default() };
        let loss_cfg = cfg.loss_config();
        let mut model = train::init_model(&ds, &cfg).unwrap();
        let sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.numel()).collect();
        let mut adam = AdamState::new(&sizes);
        let batch_ids: Vec<usize> = ds.train[..batch].to_vec();
        let ids: Vec<usize> = (0..batch).collect();
        let labels = ds.labels_of(&batch_ids);
        let views = data::augment(&ds.gather(&batch_ids), cfg.views, cfg.sigma_aug, 0).unwrap();
        let targets = icone::losses::BatchTargets { ids: &ids, labels: Some(&labels), row_labels: None, step_seed: 0 };
        g.bench_function(BenchmarkId::from_parameter(batch), |b| {
            b.iter(|| train::optimize_step(&mut model, &mut adam, &loss_cfg, &views, &targets, 1e-3, 0.0).unwrap())
        });
    }
    g.finish();
}

fn spectrum(c: &mut Criterion) {
    let n = 525;
    let z = Tensor::new(vec![n, 8], unit_rows(n, 8, 3)).unwrap();
    let views = Tensor::new(vec![n, 4, 8], unit_rows(n * 4, 8, 4)).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let mut g = c.benchmark_group("metrics");
    g.bench_function("effective_rank", |b| b.iter(|| metrics::effective_rank(&z).unwrap()));
    g.bench_function("lidar", |b| b.iter(|| metrics::lidar(&views, LIDAR_DELTA).unwrap()));
    g.bench_function("knn5", |b| b.iter(|| metrics::knn_accuracy(&z, &labels, &z, &labels, 5).unwrap()));
    g.bench_function("uniformity", |b| b.iter(|| metrics::uniformity(&z, 2.0, 0).unwrap()));
    g.finish();
}

criterion_group!(benches, diversity, training_step, spectrum);
criterion_main!(benches);
