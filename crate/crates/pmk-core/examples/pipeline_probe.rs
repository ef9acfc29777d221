use pmk_core::config::RunConfig;
use pmk_core::synth::build_toy_model;
use pmk_core::tokenizer::PoseTokenizer;
use pmk_core::train::*;
use pmk_core::train::{train_tokenizer_stage1, train_tokenizer_stage2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    let mut cfg = RunConfig::default();
    cfg.gen_train = 2000;
    cfg.gen_val = 200;
    cfg.gen_test = 200;
    let body = build_toy_model(&cfg.world()).unwrap();

    let t0 = Instant::now();
    let (train, val, _test) = generate_standard_splits(&cfg, &body).unwrap();
    println!("datagen: {:?} ({} train samples)", t0.elapsed(), train.samples.len());

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut tok = PoseTokenizer::init(cfg.tokenizer(), &mut rng);

    // stage 1
    let mut s1_cfg = cfg.clone();
    s1_cfg.steps = std::env::var("S1_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5000);
    s1_cfg.lr = std::env::var("S1_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let mut log = RunLog::new(false);
    let t0 = Instant::now();
    let r1 = train_tokenizer_stage1(&s1_cfg, &train, &val, &mut tok, &mut log).unwrap();
    println!("stage1: {:?}  held_out={:.5} body-units  utilization={:.3}",
             t0.elapsed(), r1.held_out_error, r1.utilization);

    if stage == "s1" { return; }

    // stage 2
    let mut s2_cfg = cfg.clone();
    s2_cfg.steps = std::env::var("S2_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    s2_cfg.lr = std::env::var("S2_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(3e-4);
    s2_cfg.batch_size = 16;
    let t0 = Instant::now();
    let r2 = train_tokenizer_stage2(&s2_cfg, &train, &val, &mut tok, &mut log).unwrap();
    println!("stage2: {:?}  agreement={:.4}  conf_ok={:.3} conf_bad={:.3}",
             t0.elapsed(), r2.agreement, r2.confidence_correct, r2.confidence_incorrect);

    if stage == "s2" { return; }

    // overfit sanity: 16 samples
    let mut of_cfg = cfg.clone();
    of_cfg.steps = std::env::var("OF_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    of_cfg.batch_size = 16;
    of_cfg.lr = std::env::var("OF_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
    of_cfg.model_dropout = 0.0;
    let tiny = pmk_core::synth::Dataset {
        samples: train.samples[..16].to_vec(),
        world: train.world.clone(),
        seed_provenance: "overfit-16".into(),
    };
    let mut log2 = RunLog::new(false);
    let t0 = Instant::now();
    let (model, rep) = train_main(&of_cfg, &body, &tiny, &tok, &mut log2).unwrap();
    let summary = evaluate_model(&model, &tok, &body, &tiny, &EvalOptions::default()).unwrap();
    println!("overfit: {:?}  train MPJPE={:.2} milli-units MPVPE={:.2} PA={:.2} (last loss {:.4})",
             t0.elapsed(), summary.overall.mpjpe, summary.overall.mpvpe, summary.overall.pa_mpjpe,
             rep.loss_history.last().unwrap().4);
}
