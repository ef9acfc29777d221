//! Evaluation: metrics over a split with occluded/non-occluded sub-splits
//! and per-sample records, plus the pose-input plumbing shared between
//! training and analysis (predicted, ground-truth, noisy, raw-coordinate).

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::TrainError;
use crate::geometry::{compute_metrics, MetricReport, ToyBodyModel};
use crate::model::{MeshTransformer, PoseInput, Variant};
use crate::synth::{Dataset, ToyBodySample};
use crate::tokenizer::{canonical_pose, corrupt_logits, quantize, PoseTokenizer};

/// Where pose tokens come from for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoseSource {
    /// Classifier logits from the image (the deployment path).
    Predicted,
    /// Stage-one encoder on the ground-truth 2D pose, confidence fixed at 10.
    GroundTruth,
    /// Predicted logits corrupted by seeded Gaussian noise.
    PredictedNoisy { sigma: f64, seed: u64 },
    /// No pose rows (image_only).
    None,
}

/// Owned pose input matching [`PoseInput`].
pub enum PoseInputData {
    None,
    Tokens {
        tokens: Array2<f64>,
        confidence: Array2<f64>,
    },
    RawCoords(Array2<f64>),
}

impl PoseInputData {
    pub fn as_input(&self) -> PoseInput<'_> {
        match self {
            PoseInputData::None => PoseInput::None,
            PoseInputData::Tokens { tokens, confidence } => PoseInput::Tokens {
                tokens,
                confidence,
            },
            PoseInputData::RawCoords(c) => PoseInput::RawCoords(c),
        }
    }
}

/// Build the pose-side input for one sample given the model variant and the
/// requested source. `sample_index` seeds per-sample noise.
pub fn pose_input_for(
    tok: &PoseTokenizer,
    sample: &ToyBodySample,
    variant: Variant,
    source: PoseSource,
    sample_index: usize,
) -> PoseInputData {
    if !variant.uses_pose_tokens() {
        return PoseInputData::None;
    }
    let logits_for = |sigma_seed: Option<(f64, u64)>| {
        let mut logits = tok.classifier.classify(&tok.classifier_params, &sample.image);
        if let Some((sigma, seed)) = sigma_seed {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (sample_index as u64));
            logits = corrupt_logits(&logits, sigma, &mut rng);
        }
        logits
    };
    match variant {
        Variant::RawCoordPose => {
            // Decode the predicted (quantized) tokens back to 2D coordinates.
            let logits = match source {
                PoseSource::PredictedNoisy { sigma, seed } => logits_for(Some((sigma, seed))),
                _ => logits_for(None),
            };
            let indices: Vec<usize> = (0..logits.nrows())
                .map(|r| {
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for v in 0..logits.ncols() {
                        if logits[(r, v)] > best_v {
                            best_v = logits[(r, v)];
                            best = v;
                        }
                    }
                    best
                })
                .collect();
            let mut z = Array2::zeros((logits.nrows(), tok.cfg.token_dim));
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..tok.cfg.token_dim {
                    z[(r, c)] = tok.codebook.entries[(i, c)];
                }
            }
            let coords = tok.decoder.decode(&tok.decoder_params, &z);
            PoseInputData::RawCoords(coords)
        }
        _ => match source {
            PoseSource::None => PoseInputData::None,
            PoseSource::Predicted => {
                let out = tok.output_from_logits(logits_for(None));
                PoseInputData::Tokens {
                    tokens: out.pose_tokens,
                    confidence: out.confidence,
                }
            }
            PoseSource::PredictedNoisy { sigma, seed } => {
                let out = tok.output_from_logits(logits_for(Some((sigma, seed))));
                PoseInputData::Tokens {
                    tokens: out.pose_tokens,
                    confidence: out.confidence,
                }
            }
            PoseSource::GroundTruth => {
                let pose = canonical_pose(&sample.joints2d, &sample.camera);
                let t = tok.encoder.encode(&tok.encoder_params, &pose);
                let (z, _) = quantize(&t, &tok.codebook);
                PoseInputData::Tokens {
                    tokens: z,
                    confidence: Array2::from_elem((tok.cfg.token_count, 1), 10.0),
                }
            }
        },
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub source: PoseSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            source: PoseSource::Predicted,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub index: usize,
    pub occluded: bool,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub overall: MetricReport,
    pub occluded: Option<MetricReport>,
    pub non_occluded: Option<MetricReport>,
    pub records: Vec<EvalRecord>,
}

fn mean_reports(reports: &[&MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    MetricReport {
        mpvpe: reports.iter().map(|r| r.mpvpe).sum::<f64>() / n,
        mpjpe: reports.iter().map(|r| r.mpjpe).sum::<f64>() / n,
        pa_mpjpe: reports.iter().map(|r| r.pa_mpjpe).sum::<f64>() / n,
    }
}

/// Evaluate a model over a split. Per-sample metrics are averaged overall and
/// within the occluded / non-occluded sub-splits.
pub fn evaluate_model(
    model: &MeshTransformer,
    tok: &PoseTokenizer,
    body: &ToyBodyModel,
    ds: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalSummary, TrainError> {
    let mut records = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let pose = pose_input_for(tok, s, model.cfg.variant, opts.source, i);
        let image = if model.cfg.variant.uses_image_tokens() {
            Some(&s.image)
        } else {
            None
        };
        let pred = model.predict(image, pose.as_input(), body)?;
        let report = compute_metrics(&pred.fine_vertices, &s.fine_vertices, &s.joints3d, body)?;
        records.push(EvalRecord {
            index: i,
            occluded: s.is_occluded(),
            report,
        });
    }
    let overall = mean_reports(&records.iter().map(|r| &r.report).collect::<Vec<_>>());
    let occ: Vec<&MetricReport> = records
        .iter()
        .filter(|r| r.occluded)
        .map(|r| &r.report)
        .collect();
    let clean: Vec<&MetricReport> = records
        .iter()
        .filter(|r| !r.occluded)
        .map(|r| &r.report)
        .collect();
    Ok(EvalSummary {
        overall,
        occluded: (!occ.is_empty()).then(|| mean_reports(&occ)),
        non_occluded: (!clean.is_empty()).then(|| mean_reports(&clean)),
        records,
    })
}

/// Per-sample CSV: `index,occluded,mpvpe,mpjpe,pa_mpjpe`.
pub fn write_records_csv(path: &Path, summary: &EvalSummary) -> Result<(), TrainError> {
    let mut out = String::from("index,occluded,mpvpe,mpjpe,pa_mpjpe\n");
    for r in &summary.records {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.index, r.occluded as u8, r.report.mpvpe, r.report.mpjpe, r.report.pa_mpjpe
        ));
    }
    std::fs::write(path, out).map_err(super::io_err(path))
}
