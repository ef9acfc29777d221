use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pmk_core::geometry::procrustes_align;
use pmk_core::model::{MeshTransformer, ModelConfig, PoseInput};
use pmk_core::nn::normal_init;
use pmk_core::synth::{build_toy_model, sample_body, WorldConfig};
use pmk_core::tokenizer::{quantize, Codebook, PoseTokenizer, TokenizerConfig};

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let cfg = TokenizerConfig::default();
    let cb = Codebook::init(&cfg, &mut rng);
    let tokens = normal_init(&mut rng, cfg.token_count, cfg.token_dim, 1.0);
    c.bench_function("quantize_8x32_v64", |b| {
        b.iter(|| quantize(black_box(&tokens), black_box(&cb)))
    });
}

fn bench_procrustes(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let pred = normal_init(&mut rng, 14, 3, 1.0);
    let gt = normal_init(&mut rng, 14, 3, 1.0);
    c.bench_function("procrustes_14x3", |b| {
        b.iter(|| procrustes_align(black_box(&pred), black_box(&gt)).unwrap())
    });
}

fn bench_render(c: &mut Criterion) {
    let world = WorldConfig::default();
    let body = build_toy_model(&world).unwrap();
    c.bench_function("render_sample_64px", |b| {
        b.iter(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            sample_body(black_box(&body), &mut rng, &world)
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let world = WorldConfig::default();
    let body = build_toy_model(&world).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let model = MeshTransformer::init(ModelConfig::default(), &body, &mut rng).unwrap();
    let tok = PoseTokenizer::init(TokenizerConfig::default(), &mut rng);
    let sample = sample_body(&body, &mut rng, &world);
    let out = tok.tokenize_image(&sample.image);
    c.bench_function("mesh_transformer_forward", |b| {
        b.iter(|| {
            model
                .predict(
                    Some(black_box(&sample.image)),
                    PoseInput::Tokens {
                        tokens: &out.pose_tokens,
                        confidence: &out.confidence,
                    },
                    &body,
                )
                .unwrap()
        })
    });
    c.bench_function("tokenize_image", |b| {
        b.iter(|| tok.tokenize_image(black_box(&sample.image)))
    });
}

criterion_group!(
    benches,
    bench_quantize,
    bench_procrustes,
    bench_render,
    bench_forward
);
criterion_main!(benches);
