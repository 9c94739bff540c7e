use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3, Array4};

use diffseg::dfgt::{optimize, DFGTHyper, Method};
use diffseg::diagnet::{self, DiagConfig};
use diffseg::fusion::{fuse, normalize_expertness, ExpertnessLogits};
use diffseg::metrics::{auc, high_freq_energy, soft_dice, DEFAULT_THRESHOLDS};
use diffseg::synthgen::{generate_dataset, SynthSpec};

fn plane(h: usize, w: usize, salt: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        ((y * 31 + x * 17 + salt) % 97) as f64 / 96.0
    })
}

fn metrics(c: &mut Criterion) {
    let a = plane(64, 64, 1);
    let b = plane(64, 64, 2);
    c.bench_function("soft_dice_64", |bn| {
        bn.iter(|| {
            soft_dice(
                black_box(a.view()),
                black_box(b.view()),
                &DEFAULT_THRESHOLDS,
            )
        })
    });
    c.bench_function("high_freq_energy_64", |bn| {
        bn.iter(|| high_freq_energy(black_box(a.view()), 0.25))
    });
    let scores: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
    let labels: Vec<u8> = (0..1000).map(|i| (i % 3 == 0) as u8).collect();
    c.bench_function("auc_1000", |bn| {
        bn.iter(|| auc(black_box(&scores), black_box(&labels)))
    });
}

fn fusion(c: &mut Criterion) {
    let masks = Array4::from_shape_fn((4, 2, 64, 64), |(r, k, y, x)| {
        ((r + k * 3 + y + x) % 11) as f64 / 10.0
    });
    let logits = ExpertnessLogits::new(Array4::from_shape_fn((4, 2, 64, 64), |(r, _, y, x)| {
        ((r * y + x) % 7) as f64 - 3.0
    }))
    .unwrap();
    c.bench_function("normalize_and_fuse_4x2x64", |bn| {
        bn.iter(|| fuse(black_box(&masks), &normalize_expertness(black_box(&logits))))
    });
}

fn networks(c: &mut Criterion) {
    let net = diagnet::build(DiagConfig::new(1, 2, 0)).unwrap().freeze();
    let spec = SynthSpec {
        train: 1,
        val: 0,
        test: 0,
        ..SynthSpec::default()
    };
    let data = generate_dataset(&spec).unwrap().train.dataset;
    let sample = &data.samples()[0];
    let (n, k, h, w) = sample.masks.dim();
    let logits = ExpertnessLogits::zeros(n, k, h, w);
    c.bench_function("diagnosis_loss_and_grad_64", |bn| {
        bn.iter(|| {
            net.loss_and_grad(
                &sample.image,
                &sample.masks,
                black_box(&logits),
                sample.label,
            )
        })
    });
    let image = Array3::from_elem((1, 64, 64), 0.5);
    let mask = Array3::from_elem((2, 64, 64), 0.5);
    c.bench_function("diagnosis_predict_64", |bn| {
        bn.iter(|| net.predict(black_box(&image), black_box(&mask)))
    });
    let mut group = c.benchmark_group("dfgt_10_steps");
    group.sample_size(10);
    for m in Method::ALL {
        let hyper = DFGTHyper {
            steps: 10,
            ..DFGTHyper::with_method(m)
        };
        group.bench_function(m.as_str(), |bn| bn.iter(|| optimize(&net, sample, &hyper)));
    }
    group.finish();
}

criterion_group!(benches, metrics, fusion, networks);
criterion_main!(benches);
