//! Microbenchmarks for the operations that dominate training time: dense
//! matrix multiplication, the transformer forward pass, the
//! self-distillation loss, image augmentation, and effective-rank
//! estimation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

use dino_forge_core::augment::{pretrain_view, Image, PretrainAugment};
use dino_forge_core::metrics::rankme;
use dino_forge_core::model::{
    backbone_forward, init_params, patch_tokens_tensor, ModelConfig, NetKind, VitLayout,
};
use dino_forge_core::objectives::{dino_loss, DinoState};
use dino_forge_core::rng::{derive_rng, view_rng};
use dino_forge_core::tensor::Tensor;

fn rand_f32(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = derive_rng(seed, "bench", &[n as u64]);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn rand_unit_f32(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = derive_rng(seed, "bench-unit", &[n as u64]);
    (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let a = Tensor::<f32>::constant(rand_f32(128 * 128, 1), 128, 128).unwrap();
    let b = Tensor::<f32>::constant(rand_f32(128 * 128, 2), 128, 128).unwrap();
    c.bench_function("gemm_f32_128x128", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap());
    });
}

fn bench_backbone_forward(c: &mut Criterion) {
    let cfg = ModelConfig::vit_mu(6);
    let params = init_params(&cfg, NetKind::pretrain(), 7).unwrap();
    let layout = VitLayout::from_params(&params, &cfg).unwrap();
    let tensors = params.const_tensors::<f32>();
    let batch = 8;
    let images: Vec<Image> = (0..batch)
        .map(|i| {
            Image::new(
                cfg.image_size,
                cfg.image_size,
                rand_unit_f32(cfg.image_size * cfg.image_size * 3, 10 + i as u64),
            )
            .unwrap()
        })
        .collect();
    let patches = patch_tokens_tensor::<f32>(&images, &cfg).unwrap();
    c.bench_function("backbone_forward_vit_mu_b8", |bench| {
        bench.iter(|| {
            backbone_forward(&cfg, &layout, black_box(&tensors), black_box(&patches), batch)
                .unwrap()
        });
    });
}

fn bench_dino_loss(c: &mut Criterion) {
    let (b, k) = (64, 256);
    let state = DinoState::<f32>::new(k, 0.1, 0.04, 0.9).unwrap();
    let views = |seed: u64| {
        [
            Tensor::<f32>::constant(rand_f32(b * k, seed), b, k).unwrap(),
            Tensor::<f32>::constant(rand_f32(b * k, seed + 1), b, k).unwrap(),
        ]
    };
    let student = views(20);
    let teacher = views(30);
    c.bench_function("dino_loss_b64_k256", |bench| {
        bench.iter(|| dino_loss(black_box(&student), black_box(&teacher), &state).unwrap());
    });
}

fn bench_pretrain_view(c: &mut Criterion) {
    let img = Image::new(64, 64, rand_unit_f32(64 * 64 * 3, 40)).unwrap();
    let cfg = PretrainAugment::defaults(32);
    c.bench_function("pretrain_view_64_to_32", |bench| {
        bench.iter(|| {
            let mut rng = view_rng(9, 0, 0, 0);
            pretrain_view(black_box(&img), &cfg, &mut rng).unwrap()
        });
    });
}

fn bench_rankme(c: &mut Criterion) {
    let (n, d) = (256, 64);
    let values: Vec<f64> = rand_f32(n * d, 50).into_iter().map(f64::from).collect();
    c.bench_function("rankme_256x64", |bench| {
        bench.iter(|| rankme(black_box(&values), n, d, 1e-7).unwrap());
    });
}

fn bench_parts(c: &mut Criterion) {
    let x = Tensor::<f32>::constant(rand_f32(520 * 256, 60), 520, 256).unwrap();
    c.bench_function("part_gelu_520x256", |bench| {
        bench.iter(|| black_box(&x).gelu());
    });

    let s = Tensor::<f32>::constant(rand_f32(65 * 65, 61), 65, 65).unwrap();
    c.bench_function("part_softmax_65x65", |bench| {
        bench.iter(|| black_box(&s).softmax_t(1.0f32).unwrap());
    });

    let q = Tensor::<f32>::constant(rand_f32(65 * 16, 62), 65, 16).unwrap();
    let k = Tensor::<f32>::constant(rand_f32(65 * 16, 63), 65, 16).unwrap();
    c.bench_function("part_qk_matmul_65x16", |bench| {
        bench.iter(|| black_box(&q).matmul(&black_box(&k).transpose()).unwrap());
    });

    let t = Tensor::<f32>::constant(rand_f32(520 * 64, 64), 520, 64).unwrap();
    let w = Tensor::<f32>::constant(vec![1.0; 64], 1, 64).unwrap();
    let b = Tensor::<f32>::constant(vec![0.0; 64], 1, 64).unwrap();
    c.bench_function("part_layer_norm_520x64", |bench| {
        bench.iter(|| black_box(&t).layer_norm(&w, &b, 1e-6f32).unwrap());
    });

    let sl = Tensor::<f32>::constant(rand_f32(520 * 192, 65), 520, 192).unwrap();
    c.bench_function("part_slice_65x16", |bench| {
        bench.iter(|| black_box(&sl).slice(0..65, 0..16).unwrap());
    });
}

criterion_group!(
    benches,
    bench_gemm,
    bench_backbone_forward,
    bench_dino_loss,
    bench_pretrain_view,
    bench_rankme,
    bench_parts
);
criterion_main!(benches);
