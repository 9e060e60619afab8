use criterion::{black_box, criterion_group, criterion_main, Criterion};

use cogcap_bench::{desk_data, randn, unit_rows};
use cogcap_core::autodiff::Graph;
use cogcap_core::contrastive::{positive_mask, symmetric_loss_node, ModalityExpert};
use cogcap_core::data::generate_dataset;
use cogcap_core::metrics::{nway_topk, ssim};
use cogcap_core::prior::{prior_sample, PriorNetwork};
use cogcap_core::{EncoderConfig, GenerationConfig, Modality, PriorConfig};

fn encoder(c: &mut Criterion) {
    let data = desk_data();
    let expert = ModalityExpert::init(Modality::Image, EncoderConfig::default(), data.raw_dim(), 0).unwrap();
    let idx: Vec<usize> = (0..128).collect();
    let x = data.train_x.select_rows(&idx);
    c.bench_function("encoder_forward_128", |b| b.iter(|| expert.encoder.embed(black_box(&x)).unwrap()));
    c.bench_function("encoder_forward_backward_128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = expert.encoder.params.bind(&mut g, true);
            let xn = g.constant(x.clone());
            let out = expert.encoder.forward(&mut g, &p, xn, true).unwrap();
            let s = g.sum_all(out.embedding).unwrap();
            g.grad(s, p.ids()).unwrap()
        })
    });
}

fn loss(c: &mut Criterion) {
    let (q, k) = (unit_rows(128, 64, 1), unit_rows(128, 64, 2));
    let images: Vec<usize> = (0..128).map(|i| i / 4).collect();
    let mask = positive_mask(&images);
    c.bench_function("symmetric_infonce_grad_128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (qn, kn) = (g.param(q.clone()), g.param(k.clone()));
            let scale = g.constant(cogcap_core::Tensor::scalar(1.0 / 0.07));
            let l = symmetric_loss_node(&mut g, qn, kn, &mask, scale).unwrap();
            g.grad(l, &[qn, kn]).unwrap()
        })
    });
}

fn prior(c: &mut Criterion) {
    let cfg = PriorConfig::default();
    let net = PriorNetwork::init(64, &cfg, 0).unwrap();
    let schedule = cfg.schedule().unwrap();
    let e = unit_rows(16, 64, 3);
    c.bench_function("prior_sample_16x50", |b| {
        b.iter(|| prior_sample(&net, black_box(&e), &schedule, 50, 7.5, 0).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (q, k) = (unit_rows(200, 64, 4), unit_rows(200, 64, 5));
    let truth: Vec<usize> = (0..200).collect();
    c.bench_function("nway_top5_200", |b| b.iter(|| nway_topk(&q, &k, &truth, 5).unwrap()));
    let a = randn(&[64, 64], 6);
    let bb = randn(&[64, 64], 7);
    c.bench_function("ssim_64x64_w8", |b| b.iter(|| ssim(&a, &bb, 8).unwrap()));
}

fn data(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    group.sample_size(10);
    group.bench_function("generate_default", |b| b.iter(|| generate_dataset(&GenerationConfig::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, encoder, loss, prior, metrics, data);
criterion_main!(benches);
