use pmk_core::config::RunConfig;
use pmk_core::synth::build_toy_model;
use pmk_core::tokenizer::{canonical_pose, quantize, PoseTokenizer};
use pmk_core::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let cfg = RunConfig::default();
    let body = build_toy_model(&cfg.world()).unwrap();
    let (train, val, _t) = generate_standard_splits(&cfg, &body).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut tok = PoseTokenizer::init(cfg.tokenizer(), &mut rng);
    let mut s1 = cfg.clone();
    s1.steps = 5000; s1.lr = 2e-3;
    let mut log = RunLog::new(false);
    train_tokenizer_stage1(&s1, &train, &val, &mut tok, &mut log).unwrap();

    for sigma in [0.0f64, 0.01, 0.02, 0.03, 0.05, 0.08] {
        let dist = Normal::new(0.0, sigma.max(1e-12)).unwrap();
        let mut agree = 0usize; let mut total = 0usize;
        let mut nrng = ChaCha20Rng::seed_from_u64(7);
        for s in &val.samples {
            let pose = canonical_pose(&s.joints2d, &s.camera);
            let clean = tok.labels_for_pose(&pose);
            let noisy_pose = pose.mapv(|v| v + dist.sample(&mut nrng));
            let t = tok.encoder.encode(&tok.encoder_params, &noisy_pose);
            let (_, noisy) = quantize(&t, &tok.codebook);
            for (a, b) in clean.iter().zip(noisy.iter()) {
                total += 1;
                if a == b { agree += 1; }
            }
        }
        println!("pose noise sigma={sigma:.3} body-units -> index agreement {:.3}", agree as f64 / total as f64);
    }
}
