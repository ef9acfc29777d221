//! Occlusion-sensitivity maps and logit-noise robustness sweeps.

use std::path::Path;

use rand_chacha::ChaCha20Rng;

use super::eval::{evaluate_model, pose_input_for, EvalOptions, PoseSource};
use super::report::{heatmap_svg, line_chart_svg};
use super::TrainError;
use crate::geometry::{per_joint_errors, MetricReport, ToyBodyModel};
use crate::model::MeshTransformer;
use crate::synth::{occlude, OccluderSpec, ToyBodySample, WorldConfig};
use crate::tokenizer::PoseTokenizer;
use rand::SeedableRng;

/// Per-joint error map over a sliding occluder grid.
#[derive(Debug, Clone)]
pub struct OccmapResult {
    pub grid: usize,
    pub joint_count: usize,
    /// `grid*grid*K` errors, indexed `(gy*grid + gx)*K + joint`, milli-units.
    pub errors: Vec<f64>,
    /// Per-joint error of the unoccluded input.
    pub baseline: Vec<f64>,
}

impl OccmapResult {
    pub fn error_at(&self, gy: usize, gx: usize, joint: usize) -> f64 {
        self.errors[(gy * self.grid + gx) * self.joint_count + joint]
    }

    /// Grid cell with the maximum error for one joint.
    pub fn argmax_cell(&self, joint: usize) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let v = self.error_at(gy, gx, joint);
                if v > best_v {
                    best_v = v;
                    best = (gy, gx);
                }
            }
        }
        best
    }
}

/// Slide a gray patch over a regular grid, re-run the model per position, and
/// record per-joint errors (root-aligned MPJPE per joint, not PA-aligned).
pub fn occlusion_sensitivity_map(
    model: &MeshTransformer,
    tok: &PoseTokenizer,
    body: &ToyBodyModel,
    sample: &ToyBodySample,
    world: &WorldConfig,
    grid: usize,
    patch: f64,
) -> Result<OccmapResult, TrainError> {
    let k = body.joint_count;
    let mut errors = vec![0.0; grid * grid * k];
    let run = |image: &ndarray::Array2<f64>| -> Result<Vec<f64>, TrainError> {
        let probe = ToyBodySample {
            image: image.clone(),
            ..sample.clone()
        };
        let pose = pose_input_for(tok, &probe, model.cfg.variant, PoseSource::Predicted, 0);
        let img = model.cfg.variant.uses_image_tokens().then_some(image);
        let pred = model.predict(img, pose.as_input(), body)?;
        Ok(per_joint_errors(&pred.fine_vertices, &sample.joints3d, body)?)
    };
    let baseline = run(&sample.image)?;
    for gy in 0..grid {
        for gx in 0..grid {
            let center = [
                (gx as f64 + 0.5) / grid as f64,
                (gy as f64 + 0.5) / grid as f64,
            ];
            let mut image = sample.image.clone();
            if patch > 0.0 {
                let rect = OccluderSpec {
                    center,
                    size: [patch, patch],
                    noise_fill: false,
                };
                let mut rng = ChaCha20Rng::seed_from_u64(0);
                occlude(&mut image, &rect, world, &mut rng);
            }
            let per_joint = run(&image)?;
            for (j, err) in per_joint.iter().enumerate() {
                errors[(gy * grid + gx) * k + j] = *err;
            }
        }
    }
    Ok(OccmapResult {
        grid,
        joint_count: k,
        errors,
        baseline,
    })
}

/// CSV: `gy,gx,joint,error`.
pub fn write_occmap_csv(path: &Path, map: &OccmapResult) -> Result<(), TrainError> {
    let mut out = String::from("gy,gx,joint,error\n");
    for gy in 0..map.grid {
        for gx in 0..map.grid {
            for j in 0..map.joint_count {
                out.push_str(&format!("{gy},{gx},{j},{:.6}\n", map.error_at(gy, gx, j)));
            }
        }
    }
    std::fs::write(path, out).map_err(super::io_err(path))
}

/// One SVG heat map per joint, stacked vertically in a single file.
pub fn write_occmap_svg(
    path: &Path,
    map: &OccmapResult,
    joint_names: &[&str],
) -> Result<(), TrainError> {
    let mut combined = String::new();
    for j in 0..map.joint_count {
        let values: Vec<f64> = (0..map.grid * map.grid)
            .map(|cell| map.errors[cell * map.joint_count + j])
            .collect();
        let name = joint_names.get(j).copied().unwrap_or("joint");
        combined.push_str(&heatmap_svg(
            &values,
            map.grid,
            map.grid,
            &format!("occlusion error: {name}"),
        ));
    }
    std::fs::write(path, combined).map_err(super::io_err(path))
}

/// Error under logit noise at each sigma.
#[derive(Debug, Clone)]
pub struct NoisePoint {
    pub sigma: f64,
    pub report: MetricReport,
}

/// Evaluate the model over a split at each noise level. Each (sigma, repeat)
/// uses its own seed; the mean over repeats is reported.
pub fn noise_sweep(
    model: &MeshTransformer,
    tok: &PoseTokenizer,
    body: &ToyBodyModel,
    ds: &crate::synth::Dataset,
    sigmas: &[f64],
    seed: u64,
    repeats: usize,
) -> Result<Vec<NoisePoint>, TrainError> {
    let mut points = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut acc = MetricReport {
            mpvpe: 0.0,
            mpjpe: 0.0,
            pa_mpjpe: 0.0,
        };
        for rep in 0..repeats.max(1) {
            let opts = EvalOptions {
                source: if sigma == 0.0 {
                    PoseSource::Predicted
                } else {
                    PoseSource::PredictedNoisy {
                        sigma,
                        seed: seed ^ ((si as u64) << 32) ^ ((rep as u64) << 16),
                    }
                },
            };
            let summary = evaluate_model(model, tok, body, ds, &opts)?;
            acc.mpvpe += summary.overall.mpvpe;
            acc.mpjpe += summary.overall.mpjpe;
            acc.pa_mpjpe += summary.overall.pa_mpjpe;
        }
        let r = repeats.max(1) as f64;
        points.push(NoisePoint {
            sigma,
            report: MetricReport {
                mpvpe: acc.mpvpe / r,
                mpjpe: acc.mpjpe / r,
                pa_mpjpe: acc.pa_mpjpe / r,
            },
        });
    }
    Ok(points)
}

pub fn write_noise_csv(path: &Path, points: &[NoisePoint]) -> Result<(), TrainError> {
    let mut out = String::from("sigma,mpvpe,mpjpe,pa_mpjpe\n");
    for p in points {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            p.sigma, p.report.mpvpe, p.report.mpjpe, p.report.pa_mpjpe
        ));
    }
    std::fs::write(path, out).map_err(super::io_err(path))
}

pub fn write_noise_svg(path: &Path, points: &[NoisePoint]) -> Result<(), TrainError> {
    let x: Vec<f64> = points.iter().map(|p| p.sigma).collect();
    let mpjpe: Vec<f64> = points.iter().map(|p| p.report.mpjpe).collect();
    let pa: Vec<f64> = points.iter().map(|p| p.report.pa_mpjpe).collect();
    let svg = line_chart_svg(
        &x,
        &[("mpjpe", mpjpe), ("pa_mpjpe", pa)],
        "error vs logit noise sigma",
    );
    std::fs::write(path, svg).map_err(super::io_err(path))
}
