//! Main-model training: optimize the weighted vertex/3D/2D objective over
//! the training split with the tokenizer frozen. Pose inputs are precomputed
//! once per sample (the tokenizer never changes), unless augmentation is on,
//! in which case they are rebuilt per augmented view.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::eval::{pose_input_for, PoseInputData, PoseSource};
use super::report::RunLog;
use super::TrainError;
use crate::config::RunConfig;
use crate::geometry::ToyBodyModel;
use crate::losses::{joint2d_loss, joint3d_loss, total_loss, vertex_loss, LossNodes};
use crate::model::{MeshTransformer, Variant};
use crate::nn::{AdamW, Mode, ParamSet};
use crate::synth::{apply_augment, AugmentParams, Dataset};
use crate::tensor::Graph;
use crate::tokenizer::PoseTokenizer;

#[derive(Debug, Clone)]
pub struct MainReport {
    /// (step, L_v, L_3D, L_2D, L_total) at log points.
    pub loss_history: Vec<(usize, f64, f64, f64, f64)>,
    pub steps_run: usize,
}

/// Pose source implied by the run config.
pub fn configured_source(cfg: &RunConfig) -> PoseSource {
    if cfg.variant == Variant::ImageOnly {
        PoseSource::None
    } else if cfg.gt_tokens {
        PoseSource::GroundTruth
    } else {
        PoseSource::Predicted
    }
}

pub fn train_main(
    cfg: &RunConfig,
    body: &ToyBodyModel,
    train: &Dataset,
    tok: &PoseTokenizer,
    log: &mut RunLog,
) -> Result<(MeshTransformer, MainReport), TrainError> {
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5157_0004);
    let mut model = MeshTransformer::init(cfg.model(), body, &mut init_rng)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let source = configured_source(cfg);

    // The tokenizer is frozen, so per-sample pose inputs are constants.
    let cached: Vec<PoseInputData> = if cfg.augment {
        Vec::new()
    } else {
        train
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| pose_input_for(tok, s, cfg.variant, source, i))
            .collect()
    };

    let n = train.samples.len();
    let batch = cfg.batch_size.min(n).max(1);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5157_0005);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let weights = cfg.loss_weights();
    let world = cfg.world();
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
        let bind = model.params.bind(&mut g, true);
        let mut mode = Mode::Train(ChaCha20Rng::seed_from_u64(
            (cfg.seed ^ 0x5157_0006).wrapping_add(step as u64),
        ));

        let mut sums: Option<(crate::tensor::NodeId, crate::tensor::NodeId, crate::tensor::NodeId)> =
            None;
        let mut total_nodes = Vec::with_capacity(batch);
        for &si in indices {
            let sample = &train.samples[si];
            let (owned, augmented);
            let (s_ref, pose_data) = if cfg.augment {
                let params = AugmentParams::sample(&mut rng);
                augmented = apply_augment(sample, &params, &world);
                owned = pose_input_for(tok, &augmented, cfg.variant, source, si);
                (&augmented, &owned)
            } else {
                (sample, &cached[si])
            };

            let image = cfg.variant.uses_image_tokens().then_some(&s_ref.image);
            let nodes = model.forward_graph(
                &mut g,
                &bind,
                image,
                pose_data.as_input(),
                body,
                &mut mode,
            )?;
            let lv = vertex_loss(&mut g, nodes.fine, &s_ref.fine_vertices)?;
            let l3 = joint3d_loss(
                &mut g,
                nodes.joints_from_mesh,
                nodes.joints_from_tokens,
                &s_ref.joints3d,
            )?;
            let l2 = joint2d_loss(
                &mut g,
                nodes.joints_from_mesh,
                nodes.joints_from_tokens,
                nodes.cam_scale,
                nodes.cam_translation,
                &s_ref.joints2d,
                &s_ref.visibility,
            )?;
            let lt = total_loss(
                &mut g,
                LossNodes {
                    vertex: lv,
                    joint3d: l3,
                    joint2d: l2,
                },
                &weights,
            )
            .map_err(|e| match e {
                crate::losses::LossError::NonFinite { component, value } => {
                    TrainError::Diverged {
                        step,
                        detail: format!("loss component {component} = {value}"),
                    }
                }
                other => TrainError::Loss(other),
            })?;
            total_nodes.push(lt);
            sums = Some(match sums {
                None => (lv, l3, l2),
                Some((av, a3, a2)) => (g.add(av, lv), g.add(a3, l3), g.add(a2, l2)),
            });
        }

        let total_sum = total_nodes
            .iter()
            .skip(1)
            .fold(total_nodes[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(total_sum, 1.0 / batch as f64);
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            if let Some(ps) = last_good {
                model.params = ps;
            }
            return Err(TrainError::Diverged {
                step,
                detail: format!("batch loss = {loss_value}"),
            });
        }

        let (sv, s3, s2) = sums.unwrap();
        let mean_v = g.scalar(sv) / batch as f64;
        let mean_3 = g.scalar(s3) / batch as f64;
        let mean_2 = g.scalar(s2) / batch as f64;

        let mut grads = g.backward(loss);
        let gvec = bind.grads(&mut grads);
        opt.step(&mut model.params, &gvec);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            history.push((step, mean_v, mean_3, mean_2, loss_value));
            log.record(step, mean_v, mean_3, mean_2, loss_value);
        }
        if step % cfg.eval_every == 0 {
            last_good = Some(model.params.clone());
        }
    }

    Ok((
        model,
        MainReport {
            loss_history: history,
            steps_run: cfg.steps,
        },
    ))
}
