//! `pmk`: data generation, tokenizer and model training, evaluation, and the
//! ablation/occlusion/noise analyses, driven by `key = value` configs with
//! `PMK_*` environment overrides.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/divergence error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pmk_core::config::{ConfigError, RunConfig};
use pmk_core::model::Variant;
use pmk_core::synth::{build_toy_model, Dataset, JOINT_NAMES};
use pmk_core::tokenizer::PoseTokenizer;
use pmk_core::train::*;

#[derive(Parser)]
#[command(name = "pmk", about = "pose-token mesh recovery toolkit", version)]
struct Cli {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for logs, reports, and plots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint path (input for eval/analysis, output for training).
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    split: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test datasets.
    GenData,
    /// Train tokenizer stage one (pose VQ with EMA codebook).
    Tok1Train,
    /// Train tokenizer stage two (image classifier against stage-one labels).
    Tok2Train,
    /// Train the mesh transformer against a frozen tokenizer.
    Train,
    /// Evaluate a checkpoint on a split.
    Eval,
    /// Occlusion-sensitivity maps for test samples.
    Occmap,
    /// Train and compare token-type variants.
    Ablate,
    /// Metrics under logit noise.
    NoiseSweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                TrainError::Config(_) => 2u8,
                TrainError::MissingCheckpoint(_) => 3,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let env: Vec<(String, String)> = std::env::vars().collect();
    cfg.apply_env(&env)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(variant) = &cli.variant {
        cfg.apply_kv("variant", variant)?;
    }
    if let Some(split) = &cli.split {
        cfg.apply_kv("split", split)?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, TrainError> {
    let dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("pmk-out"));
    std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn load_named_split(cfg: &RunConfig) -> Result<Dataset, TrainError> {
    let path = match cfg.split.as_str() {
        "train" => RunConfig::require(&cfg.data_train, "data.train")?,
        "val" => RunConfig::require(&cfg.data_val, "data.val")?,
        _ => RunConfig::require(&cfg.data_test, "data.test")?,
    };
    load_split(&path, cfg)
}

fn run(cli: Cli) -> Result<(), TrainError> {
    let cfg = build_config(&cli)?;
    let body = build_toy_model(&cfg.world())?;
    match cli.command {
        Command::GenData => {
            let (train, val, test) = generate_standard_splits(&cfg, &body)?;
            println!(
                "generated {} train / {} val / {} test samples (config {})",
                train.samples.len(),
                val.samples.len(),
                test.samples.len(),
                &cfg.hash()[..12]
            );
            Ok(())
        }
        Command::Tok1Train => {
            let train = load_split(&RunConfig::require(&cfg.data_train, "data.train")?, &cfg)?;
            let val = load_split(&RunConfig::require(&cfg.data_val, "data.val")?, &cfg)?;
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let mut tok = PoseTokenizer::init(cfg.tokenizer(), &mut rng);
            let mut log = RunLog::new(true);
            let report = train_tokenizer_stage1(&cfg, &train, &val, &mut tok, &mut log)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_out.clone())
                .ok_or(ConfigError::MissingKey("ckpt.out"))
                .map_err(TrainError::Config)?;
            save_tokenizer(&ckpt, &tok, &cfg.hash())?;
            let dir = out_dir(&cfg)?;
            log.write_to(&dir.join("tok1_train_log.csv"))?;
            println!(
                "stage1: held_out_recon = {:.5} body units, utilization = {:.3}",
                report.held_out_error, report.utilization
            );
            Ok(())
        }
        Command::Tok2Train => {
            let train = load_split(&RunConfig::require(&cfg.data_train, "data.train")?, &cfg)?;
            let val = load_split(&RunConfig::require(&cfg.data_val, "data.val")?, &cfg)?;
            let stage1 = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (mut tok, _) = load_tokenizer(&stage1)?;
            let mut log = RunLog::new(true);
            let report = train_tokenizer_stage2(&cfg, &train, &val, &mut tok, &mut log)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_out.clone())
                .ok_or(ConfigError::MissingKey("ckpt.out"))
                .map_err(TrainError::Config)?;
            save_tokenizer(&ckpt, &tok, &cfg.hash())?;
            let dir = out_dir(&cfg)?;
            log.write_to(&dir.join("tok2_train_log.csv"))?;
            println!("stage2: held_out_agreement = {:.4}", report.agreement);
            Ok(())
        }
        Command::Train => {
            let train = load_split(&RunConfig::require(&cfg.data_train, "data.train")?, &cfg)?;
            let tok_path = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (tok, tok_meta) = load_tokenizer(&tok_path)?;
            let mut log = RunLog::new(true);
            let (model, _report) = train_main(&cfg, &body, &train, &tok, &mut log)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_out.clone())
                .ok_or(ConfigError::MissingKey("ckpt.out"))
                .map_err(TrainError::Config)?;
            save_model(&ckpt, &model, &cfg.hash(), &tok_meta.file_hash)?;
            let dir = out_dir(&cfg)?;
            log.write_to(&dir.join("train_log.csv"))?;
            println!("trained {} for {} steps", cfg.variant.name(), cfg.steps);
            Ok(())
        }
        Command::Eval => {
            let ds = load_named_split(&cfg)?;
            let tok_path = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (tok, _) = load_tokenizer(&tok_path)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_in.clone())
                .ok_or(ConfigError::MissingKey("ckpt.in"))
                .map_err(TrainError::Config)?;
            let (model, _) = load_model(&ckpt, &body)?;
            let opts = EvalOptions {
                source: if cfg.gt_tokens {
                    PoseSource::GroundTruth
                } else if model.cfg.variant == Variant::ImageOnly {
                    PoseSource::None
                } else {
                    PoseSource::Predicted
                },
            };
            let summary = evaluate_model(&model, &tok, &body, &ds, &opts)?;
            print!("{}", summary.overall.to_record());
            if let Some(occ) = &summary.occluded {
                println!("# occluded sub-split");
                print!("{}", occ.to_record());
            }
            if let Some(clean) = &summary.non_occluded {
                println!("# non-occluded sub-split");
                print!("{}", clean.to_record());
            }
            let dir = out_dir(&cfg)?;
            write_records_csv(&dir.join(format!("eval_{}.csv", cfg.split)), &summary)?;
            Ok(())
        }
        Command::Occmap => {
            let ds = load_named_split(&cfg)?;
            let tok_path = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (tok, _) = load_tokenizer(&tok_path)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_in.clone())
                .ok_or(ConfigError::MissingKey("ckpt.in"))
                .map_err(TrainError::Config)?;
            let (model, _) = load_model(&ckpt, &body)?;
            let dir = out_dir(&cfg)?;
            let world = cfg.world();
            let clean: Vec<_> = ds
                .samples
                .iter()
                .filter(|s| !s.is_occluded())
                .take(cfg.occmap_samples)
                .collect();
            for (i, sample) in clean.iter().enumerate() {
                let map = occlusion_sensitivity_map(
                    &model,
                    &tok,
                    &body,
                    sample,
                    &world,
                    cfg.occmap_grid,
                    cfg.occmap_patch,
                )?;
                write_occmap_csv(&dir.join(format!("occmap_{i:03}.csv")), &map)?;
                write_occmap_svg(&dir.join(format!("occmap_{i:03}.svg")), &map, &JOINT_NAMES)?;
            }
            println!(
                "wrote {} occlusion maps ({}x{} grid) to {}",
                clean.len(),
                cfg.occmap_grid,
                cfg.occmap_grid,
                dir.display()
            );
            Ok(())
        }
        Command::Ablate => {
            let train = load_split(&RunConfig::require(&cfg.data_train, "data.train")?, &cfg)?;
            let test = load_split(&RunConfig::require(&cfg.data_test, "data.test")?, &cfg)?;
            let tok_path = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (tok, _) = load_tokenizer(&tok_path)?;
            let mut table = ComparisonTable::default();
            let variants: [(&str, Variant, bool); 5] = [
                ("fused", Variant::Fused, false),
                ("image_only", Variant::ImageOnly, false),
                ("pose_only", Variant::PoseOnly, false),
                ("raw_coord_pose", Variant::RawCoordPose, false),
                ("gt_tokens", Variant::Fused, true),
            ];
            for (label, variant, gt) in variants {
                let mut vcfg = cfg.clone();
                vcfg.variant = variant;
                vcfg.gt_tokens = gt;
                let mut log = RunLog::new(false);
                let (model, _) = train_main(&vcfg, &body, &train, &tok, &mut log)?;
                let opts = EvalOptions {
                    source: if gt {
                        PoseSource::GroundTruth
                    } else if variant == Variant::ImageOnly {
                        PoseSource::None
                    } else {
                        PoseSource::Predicted
                    },
                };
                let summary = evaluate_model(&model, &tok, &body, &test, &opts)?;
                table.rows.push(ComparisonRow {
                    label: label.to_string(),
                    mpvpe: summary.overall.mpvpe,
                    mpjpe: summary.overall.mpjpe,
                    pa_mpjpe: summary.overall.pa_mpjpe,
                    config_hash: vcfg.hash(),
                });
                eprintln!("{label}: mpjpe {:.3}", summary.overall.mpjpe);
            }
            print!("{}", table.to_text());
            let dir = out_dir(&cfg)?;
            table.write_csv(&dir.join("ablation.csv"))?;
            Ok(())
        }
        Command::NoiseSweep => {
            let ds = load_named_split(&cfg)?;
            let tok_path = RunConfig::require(&cfg.tokenizer_ckpt, "ckpt.tokenizer")?;
            let (tok, _) = load_tokenizer(&tok_path)?;
            let ckpt = cli
                .ckpt
                .clone()
                .or(cfg.ckpt_in.clone())
                .ok_or(ConfigError::MissingKey("ckpt.in"))
                .map_err(TrainError::Config)?;
            let (model, _) = load_model(&ckpt, &body)?;
            let points = noise_sweep(&model, &tok, &body, &ds, &cfg.noise_sigmas, cfg.seed, 3)?;
            for p in &points {
                println!(
                    "sigma {:>6.3}: mpjpe {:.3}  pa_mpjpe {:.3}",
                    p.sigma, p.report.mpjpe, p.report.pa_mpjpe
                );
            }
            let dir = out_dir(&cfg)?;
            write_noise_csv(&dir.join("noise_sweep.csv"), &points)?;
            write_noise_svg(&dir.join("noise_sweep.svg"), &points)?;
            Ok(())
        }
    }
}
