use pmk_core::config::RunConfig;
use pmk_core::synth::{build_toy_model, Dataset};
use pmk_core::tokenizer::{canonical_pose, PoseTokenizer};
use pmk_core::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn agreement_split(tok: &PoseTokenizer, ds: &Dataset) -> (f64, f64, f64) {
    let (mut c_occ, mut t_occ, mut c_cl, mut t_cl) = (0, 0, 0, 0);
    for s in &ds.samples {
        let labels = tok.labels_for_pose(&canonical_pose(&s.joints2d, &s.camera));
        let logits = tok.classifier.classify(&tok.classifier_params, &s.image);
        for (row, &label) in labels.iter().enumerate() {
            let mut best = 0; let mut bv = f64::NEG_INFINITY;
            for v in 0..logits.ncols() { if logits[(row, v)] > bv { bv = logits[(row, v)]; best = v; } }
            if s.is_occluded() { t_occ += 1; if best == label { c_occ += 1; } }
            else { t_cl += 1; if best == label { c_cl += 1; } }
        }
    }
    let total = (c_occ + c_cl) as f64 / (t_occ + t_cl) as f64;
    (total, c_cl as f64 / t_cl.max(1) as f64, c_occ as f64 / t_occ.max(1) as f64)
}

fn main() {
    let mut cfg = RunConfig::default();
    let body = build_toy_model(&cfg.world()).unwrap();
    let (train, val, _test) = generate_standard_splits(&cfg, &body).unwrap();
    let pool_n: usize = std::env::var("S2_POOL").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let pool = if pool_n > 0 {
        generate_split(&cfg.world(), &body, cfg.seed + 3_000_000, pool_n)
    } else { train.clone() };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let mut tok_cfg = cfg.tokenizer();
    tok_cfg.classifier_hidden = env("S2_HIDDEN", 256.0) as usize;
    if let Ok(ch) = std::env::var("S2_CHANNELS") {
        tok_cfg.classifier_channels = ch.split(',').map(|s| s.parse().unwrap()).collect();
    }
    let mut tok = PoseTokenizer::init(tok_cfg, &mut rng);

    let mut s1_cfg = cfg.clone();
    s1_cfg.steps = 5000; s1_cfg.lr = 2e-3;
    let mut log = RunLog::new(false);
    let t0 = Instant::now();
    let r1 = train_tokenizer_stage1(&s1_cfg, &train, &val, &mut tok, &mut log).unwrap();
    eprintln!("stage1: {:?} held_out={:.4}", t0.elapsed(), r1.held_out_error);

    let mut s2_cfg = cfg.clone();
    s2_cfg.steps = env("S2_STEPS", 1500.0) as usize;
    s2_cfg.lr = env("S2_LR", 5e-4);
    s2_cfg.batch_size = env("S2_BATCH", 32.0) as usize;
    s2_cfg.augment = std::env::var("S2_AUG").map(|v| v == "1").unwrap_or(true);
    let t0 = Instant::now();
    let _r2 = train_tokenizer_stage2(&s2_cfg, &pool, &val, &mut tok, &mut log).unwrap();
    let (v_tot, v_cl, v_occ) = agreement_split(&tok, &val);
    let train_head = Dataset { samples: train.samples[..200].to_vec(), world: train.world.clone(), seed_provenance: String::new() };
    let (t_tot, t_cl, t_occ) = agreement_split(&tok, &train_head);
    eprintln!("stage2: {:?}  val={:.3} (clean {:.3} / occ {:.3})  train={:.3} (clean {:.3} / occ {:.3})",
        t0.elapsed(), v_tot, v_cl, v_occ, t_tot, t_cl, t_occ);
}
