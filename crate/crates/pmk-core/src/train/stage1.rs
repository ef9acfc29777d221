//! Tokenizer stage one: pose reconstruction through the quantized bottleneck
//! with a commitment term, EMA codebook updates each step, and dead-entry
//! re-seeding at epoch boundaries.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::report::RunLog;
use super::TrainError;
use crate::config::RunConfig;
use crate::nn::{AdamW, Mode, ParamSet};
use crate::synth::Dataset;
use crate::tensor::Graph;
use crate::tokenizer::{canonical_pose, ema_update, quantize, PoseTokenizer};

#[derive(Debug, Clone)]
pub struct Stage1Report {
    /// (step, training loss) history at log points.
    pub loss_history: Vec<(usize, f64)>,
    /// Held-out mean per-joint reconstruction error in body-scale units.
    pub held_out_error: f64,
    /// Fraction of codebook entries assigned at least once in the last epoch.
    pub utilization: f64,
    pub steps_run: usize,
}

/// Mean per-joint reconstruction error over a dataset, divided by each
/// sample's camera scale so the number reads in body-scale units.
pub fn reconstruction_error(tok: &PoseTokenizer, ds: &Dataset) -> f64 {
    let mut total = 0.0;
    for s in &ds.samples {
        let pose = canonical_pose(&s.joints2d, &s.camera);
        let tokens = tok.encoder.encode(&tok.encoder_params, &pose);
        let (z, _) = quantize(&tokens, &tok.codebook);
        let recon = tok.decoder.decode(&tok.decoder_params, &z);
        let mut err = 0.0;
        for j in 0..recon.nrows() {
            let dx = recon[(j, 0)] - pose[(j, 0)];
            let dy = recon[(j, 1)] - pose[(j, 1)];
            err += (dx * dx + dy * dy).sqrt();
        }
        total += err / recon.nrows() as f64;
    }
    total / ds.samples.len() as f64
}

pub fn train_tokenizer_stage1(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    tok: &mut PoseTokenizer,
    log: &mut RunLog,
) -> Result<Stage1Report, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5157_0001);
    let mut enc_opt = AdamW::new(
        &tok.encoder_params,
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.weight_decay,
    );
    let mut dec_opt = AdamW::new(
        &tok.decoder_params,
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.weight_decay,
    );

    let n = train.samples.len();
    let batch = cfg.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut assigned_this_epoch = vec![false; tok.codebook.len()];
    let mut last_epoch_utilization: Option<f64> = None;
    let mut token_reservoir: Vec<Vec<f64>> = Vec::new();
    let mut history = Vec::new();
    let mut last_good: Option<(ParamSet, ParamSet)> = None;

    for step in 0..cfg.steps {
        if cursor + batch > n {
            last_epoch_utilization = Some(
                assigned_this_epoch.iter().filter(|&&a| a).count() as f64
                    / tok.codebook.len() as f64,
            );
            // Epoch boundary: re-seed entries that went unassigned.
            let dead: Vec<usize> = assigned_this_epoch
                .iter()
                .enumerate()
                .filter(|(_, &a)| !a)
                .map(|(i, _)| i)
                .collect();
            if !dead.is_empty() && !token_reservoir.is_empty() {
                for idx in dead {
                    let pick = rng.gen_range(0..token_reservoir.len());
                    tok.codebook.reseed_entry(idx, &token_reservoir[pick]);
                }
            }
            assigned_this_epoch.iter_mut().for_each(|a| *a = false);
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + batch];
        cursor += batch;

        let mut g = Graph::new();
        let enc_bind = tok.encoder_params.bind(&mut g, true);
        let dec_bind = tok.decoder_params.bind(&mut g, true);
        let mut mode = Mode::Eval; // mixers run with dropout 0

        let mut per_sample_losses = Vec::with_capacity(batch);
        let mut batch_tokens: Vec<Array2<f64>> = Vec::with_capacity(batch);
        let mut batch_indices: Vec<usize> = Vec::with_capacity(batch * tok.cfg.token_count);
        for &si in indices {
            let sample = &train.samples[si];
            let pose = canonical_pose(&sample.joints2d, &sample.camera);
            let coords = g.constant(pose.clone());
            let t = tok.encoder.forward(&mut g, &enc_bind, coords, &mut mode);
            let (z, idx) = quantize(g.value(t), &tok.codebook);
            for &i in &idx {
                assigned_this_epoch[i] = true;
            }
            batch_indices.extend(idx);
            batch_tokens.push(g.value(t).clone());

            // Straight-through into the decoder; commitment pulls the encoder
            // toward the (stop-gradient) codebook entries.
            let z_node = g.straight_through(t, z.clone());
            let recon = tok.decoder.forward(&mut g, &dec_bind, z_node, &mut mode);
            let gt = g.constant(pose.clone());
            let diff = g.sub(recon, gt);
            let l1 = g.abs(diff);
            let l1 = g.sum_all(l1);
            let recon_loss = g.scale(l1, 1.0 / pose.nrows() as f64);

            let z_const = g.constant(z);
            let commit = g.sub(t, z_const);
            let commit = g.sqr(commit);
            let commit = g.mean_all(commit);
            let commit = g.scale(commit, tok.cfg.commitment_beta);

            per_sample_losses.push(g.add(recon_loss, commit));
        }
        let sum = per_sample_losses
            .iter()
            .skip(1)
            .fold(per_sample_losses[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(sum, 1.0 / batch as f64);
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            if let Some((enc, dec)) = last_good {
                tok.encoder_params = enc;
                tok.decoder_params = dec;
            }
            return Err(TrainError::Diverged {
                step,
                detail: format!("stage-1 loss = {loss_value}"),
            });
        }

        let mut grads = g.backward(loss);
        let enc_grads = enc_bind.grads(&mut grads);
        let dec_grads = dec_bind.grads(&mut grads);
        enc_opt.step(&mut tok.encoder_params, &enc_grads);
        dec_opt.step(&mut tok.decoder_params, &dec_grads);

        // EMA codebook update from the pre-update assignments.
        let all_tokens = {
            let rows: usize = batch_tokens.iter().map(|t| t.nrows()).sum();
            let mut m = Array2::zeros((rows, tok.cfg.token_dim));
            let mut r = 0;
            for t in &batch_tokens {
                m.slice_mut(ndarray::s![r..r + t.nrows(), ..]).assign(t);
                r += t.nrows();
            }
            m
        };
        ema_update(&mut tok.codebook, &all_tokens, &batch_indices);

        // Reservoir of recent encoder outputs for dead-entry re-seeding.
        token_reservoir.clear();
        for t in &batch_tokens {
            for row in t.rows() {
                token_reservoir.push(row.to_vec());
            }
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            history.push((step, loss_value));
            log.record(step, loss_value, 0.0, 0.0, loss_value);
        }
        if step % cfg.eval_every == 0 {
            last_good = Some((tok.encoder_params.clone(), tok.decoder_params.clone()));
        }
    }

    // Prefer the last full epoch; fall back to the trailing partial one.
    let partial =
        assigned_this_epoch.iter().filter(|&&a| a).count() as f64 / tok.codebook.len() as f64;
    let utilization = last_epoch_utilization.unwrap_or(partial);
    let held_out_error = reconstruction_error(tok, val);
    log.note(&format!(
        "stage1 done: held_out={held_out_error:.5} utilization={utilization:.3}"
    ));
    Ok(Stage1Report {
        loss_history: history,
        held_out_error,
        utilization,
        steps_run: cfg.steps,
    })
}
