//! Tokenizer stage two: the image classifier is trained with cross-entropy
//! against token indices produced by the frozen stage-one encoder. Stage-one
//! parameters and the codebook are never touched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::report::RunLog;
use super::TrainError;
use crate::config::RunConfig;
use crate::nn::{AdamW, Mode, ParamSet};
use crate::synth::{apply_augment, AugmentParams, Dataset};
use crate::tensor::Graph;
use crate::tokenizer::{canonical_pose, PoseTokenizer};

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub loss_history: Vec<(usize, f64)>,
    /// Held-out top-1 agreement with stage-one labels.
    pub agreement: f64,
    /// Mean max-logit for correctly vs incorrectly predicted tokens.
    pub confidence_correct: f64,
    pub confidence_incorrect: f64,
}

/// Top-1 index agreement and confidence statistics on a dataset.
pub fn classifier_agreement(tok: &PoseTokenizer, ds: &Dataset) -> (f64, f64, f64) {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut conf_correct = (0.0, 0usize);
    let mut conf_incorrect = (0.0, 0usize);
    for s in &ds.samples {
        let labels = tok.labels_for_pose(&canonical_pose(&s.joints2d, &s.camera));
        let logits = tok.classifier.classify(&tok.classifier_params, &s.image);
        for (row, &label) in labels.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for v in 0..logits.ncols() {
                if logits[(row, v)] > best_v {
                    best_v = logits[(row, v)];
                    best = v;
                }
            }
            total += 1;
            if best == label {
                correct += 1;
                conf_correct.0 += best_v;
                conf_correct.1 += 1;
            } else {
                conf_incorrect.0 += best_v;
                conf_incorrect.1 += 1;
            }
        }
    }
    (
        correct as f64 / total.max(1) as f64,
        conf_correct.0 / conf_correct.1.max(1) as f64,
        conf_incorrect.0 / conf_incorrect.1.max(1) as f64,
    )
}

pub fn train_tokenizer_stage2(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    tok: &mut PoseTokenizer,
    log: &mut RunLog,
) -> Result<Stage2Report, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5157_0002);
    let mut opt = AdamW::new(
        &tok.classifier_params,
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.weight_decay,
    );

    // Stage-one is frozen, so labels are fixed: compute them once.
    let labels: Vec<Vec<usize>> = train
        .samples
        .iter()
        .map(|s| tok.labels_for_pose(&canonical_pose(&s.joints2d, &s.camera)))
        .collect();

    let n = train.samples.len();
    let batch = cfg.batch_size.min(n).max(1);
    let world = cfg.world();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut history = Vec::new();
    let mut last_good: Option<ParamSet> = None;

    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + batch];
        cursor += batch;

        let mut g = Graph::new();
        let bind = tok.classifier_params.bind(&mut g, true);
        let mut mode = Mode::Train(ChaCha20Rng::seed_from_u64(
            cfg.seed ^ 0x5157_0003 ^ step as u64,
        ));
        let mut per_sample = Vec::with_capacity(batch);
        for &si in indices {
            let sample = &train.samples[si];
            // Augmented views get fresh labels from the exactly-transformed
            // pose; the frozen encoder makes this cheap.
            let (image, label) = if cfg.augment {
                let params = AugmentParams::sample(&mut rng);
                let aug = apply_augment(sample, &params, &world);
                let label = tok.labels_for_pose(&canonical_pose(&aug.joints2d, &aug.camera));
                (aug.image, label)
            } else {
                (sample.image.clone(), labels[si].clone())
            };
            let img = g.constant(image);
            let logits = tok.classifier.forward(&mut g, &bind, img, &mut mode);
            per_sample.push(g.cross_entropy_mean(logits, &label));
        }
        let sum = per_sample
            .iter()
            .skip(1)
            .fold(per_sample[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(sum, 1.0 / batch as f64);
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            if let Some(ps) = last_good {
                tok.classifier_params = ps;
            }
            return Err(TrainError::Diverged {
                step,
                detail: format!("stage-2 loss = {loss_value}"),
            });
        }
        let mut grads = g.backward(loss);
        let gvec = bind.grads(&mut grads);
        opt.step(&mut tok.classifier_params, &gvec);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            history.push((step, loss_value));
            log.record(step, loss_value, 0.0, 0.0, loss_value);
        }
        if step % cfg.eval_every == 0 {
            last_good = Some(tok.classifier_params.clone());
        }
    }

    let (agreement, confidence_correct, confidence_incorrect) = classifier_agreement(tok, val);
    log.note(&format!(
        "stage2 done: agreement={agreement:.4} conf_ok={confidence_correct:.3} conf_bad={confidence_incorrect:.3}"
    ));
    Ok(Stage2Report {
        loss_history: history,
        agreement,
        confidence_correct,
        confidence_incorrect,
    })
}
