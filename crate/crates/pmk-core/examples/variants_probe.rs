use pmk_core::config::RunConfig;
use pmk_core::model::Variant;
use pmk_core::synth::{build_toy_model, limb_footprint_mask, Dataset};
use pmk_core::tokenizer::PoseTokenizer;
use pmk_core::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;
use std::time::Instant;

fn envf(k: &str, d: f64) -> f64 { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }

fn main() {
    let cache = Path::new("/tmp/pmk_cache");
    std::fs::create_dir_all(cache).unwrap();
    let mut cfg = RunConfig::default();
    cfg.data_train = Some(cache.join("train.toybody"));
    cfg.data_val = Some(cache.join("val.toybody"));
    cfg.data_test = Some(cache.join("test.toybody"));
    let body = build_toy_model(&cfg.world()).unwrap();

    let (train, val, test) = if cfg.data_train.as_ref().unwrap().exists() && std::env::var("REGEN").is_err() {
        (load_split(&cache.join("train.toybody"), &cfg).unwrap(),
         load_split(&cache.join("val.toybody"), &cfg).unwrap(),
         load_split(&cache.join("test.toybody"), &cfg).unwrap())
    } else {
        generate_standard_splits(&cfg, &body).unwrap()
    };
    let pool_path = cache.join("pool.toybody");
    let pool = if pool_path.exists() && std::env::var("REGEN").is_err() {
        load_split(&pool_path, &cfg).unwrap()
    } else {
        let p = generate_split(&cfg.world(), &body, cfg.seed + 3_000_000, 6000);
        pmk_core::synth::write_dataset(&pool_path, &p).unwrap();
        p
    };

    // Tokenizer: cached two-stage training.
    let tok_path = cache.join("tok.ckpt");
    let tok: PoseTokenizer = if tok_path.exists() && std::env::var("RETOK").is_err() {
        load_tokenizer(&tok_path).unwrap().0
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut tok = PoseTokenizer::init(cfg.tokenizer(), &mut rng);
        let mut log = RunLog::new(false);
        let mut s1 = cfg.clone(); s1.steps = 5000; s1.lr = 2e-3;
        let t0 = Instant::now();
        let r1 = train_tokenizer_stage1(&s1, &train, &val, &mut tok, &mut log).unwrap();
        eprintln!("stage1 {:?}: recon={:.4} util={:.2}", t0.elapsed(), r1.held_out_error, r1.utilization);
        let mut s2 = cfg.clone();
        s2.steps = envf("S2_STEPS", 5000.0) as usize; s2.lr = envf("S2_LR", 1e-3);
        s2.batch_size = 32; s2.augment = true; s2.tok_classifier_hidden = 384;
        let t0 = Instant::now();
        let r2 = train_tokenizer_stage2(&s2, &pool, &val, &mut tok, &mut log).unwrap();
        eprintln!("stage2 {:?}: agreement={:.4}", t0.elapsed(), r2.agreement);
        save_tokenizer(&tok_path, &tok, &cfg.hash()).unwrap();
        tok
    };

    // Variants.
    let steps = envf("V_STEPS", 1200.0) as usize;
    let lr = envf("V_LR", 3e-4);
    let specs: Vec<(&str, Variant, bool)> = vec![
        ("fused", Variant::Fused, false),
        ("image_only", Variant::ImageOnly, false),
        ("pose_only", Variant::PoseOnly, false),
        ("gt_tokens", Variant::Fused, true),
    ];
    let skip: Vec<String> = std::env::var("SKIP").unwrap_or_default().split(',').map(|s| s.to_string()).collect();
    for (label, variant, gt) in &specs {
        if skip.iter().any(|s| s == label) { continue; }
        let ck = cache.join(format!("model_{label}_{steps}.ckpt"));
        if ck.exists() && std::env::var("RETRAIN").is_err() { continue; }
        let mut vcfg = cfg.clone();
        vcfg.variant = *variant; vcfg.gt_tokens = *gt; vcfg.steps = steps; vcfg.lr = lr;
        let mut log = RunLog::new(false);
        let t0 = Instant::now();
        let (model, rep) = train_main(&vcfg, &body, &train, &tok, &mut log).unwrap();
        eprintln!("{label}: trained {:?} (last loss {:.3})", t0.elapsed(), rep.loss_history.last().unwrap().4);
        save_model(&ck, &model, &vcfg.hash(), "x").unwrap();
    }

    // Evaluate all.
    println!("\n== evaluation on test split (overall | occluded | clean) mpjpe/pa ==");
    for (label, variant, gt) in &specs {
        let ck = cache.join(format!("model_{label}_{steps}.ckpt"));
        if !ck.exists() { continue; }
        let (model, _) = load_model(&ck, &body).unwrap();
        let opts = EvalOptions { source: if *gt { PoseSource::GroundTruth }
            else if *variant == Variant::ImageOnly { PoseSource::None } else { PoseSource::Predicted } };
        let s = evaluate_model(&model, &tok, &body, &test, &opts).unwrap();
        let occ = s.occluded.unwrap();
        let cl = s.non_occluded.unwrap();
        println!("{label:<12} overall {:7.2}/{:6.2} | occ {:7.2}/{:6.2} | clean {:7.2}/{:6.2}",
            s.overall.mpjpe, s.overall.pa_mpjpe, occ.mpjpe, occ.pa_mpjpe, cl.mpjpe, cl.pa_mpjpe);
    }

    // Occmap locality on fused for limb joints.
    if std::env::var("OCCMAP").is_ok() {
        let ck = cache.join(format!("model_fused_{steps}.ckpt"));
        let (model, _) = load_model(&ck, &body).unwrap();
        let world = cfg.world();
        let limb_joints = [3usize, 4, 6, 7, 9, 10, 12, 13]; // knees/ankles/elbows/wrists
        let clean: Vec<_> = test.samples.iter().filter(|s| !s.is_occluded()).take(20).collect();
        let mut hits = vec![0usize; limb_joints.len()];
        let t0 = Instant::now();
        for sample in &clean {
            let map = occlusion_sensitivity_map(&model, &tok, &body, sample, &world, 8, 0.25).unwrap();
            for (li, &j) in limb_joints.iter().enumerate() {
                let (gy, gx) = map.argmax_cell(j);
                let mask = limb_footprint_mask(&sample.joints2d, &sample.camera, sample.shape_scale, &body, j, &world);
                // does the occluder cell intersect the limb footprint?
                let (h, w) = (world.image_h, world.image_w);
                let cell = |g: usize, n: usize| ((g as f64 + 0.5) / 8.0, 0.25 / 2.0, n);
                let (cy, half, _) = cell(gy, h); let (cx, _, _) = cell(gx, w);
                let mut hit = false;
                for py in 0..h { for px in 0..w {
                    if !mask[(py, px)] { continue; }
                    let y = (py as f64 + 0.5) / h as f64; let x = (px as f64 + 0.5) / w as f64;
                    if (y - cy).abs() <= half && (x - cx).abs() <= half { hit = true; break; }
                } if hit { break; } }
                if hit { hits[li] += 1; }
            }
        }
        eprintln!("occmap {:?}", t0.elapsed());
        for (li, &j) in limb_joints.iter().enumerate() {
            println!("joint {j:2} locality hits: {}/20", hits[li]);
        }
    }

    // Noise sweep fused vs pose_only.
    if std::env::var("NOISE").is_ok() {
        let sigmas = [0.0, 0.5, 1.0, 2.0, 4.0];
        for label in ["fused", "pose_only"] {
            let ck = cache.join(format!("model_{label}_{steps}.ckpt"));
            let (model, _) = load_model(&ck, &body).unwrap();
            let pts = noise_sweep(&model, &tok, &body, &test, &sigmas, 99, 3).unwrap();
            let v: Vec<String> = pts.iter().map(|p| format!("{:.2}", p.report.mpjpe)).collect();
            println!("{label:<10} mpjpe over sigma: {}", v.join("  "));
        }
    }
    let _ = (Dataset { samples: vec![], world: cfg.world(), seed_provenance: String::new() },);
}
