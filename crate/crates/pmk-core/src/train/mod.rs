//! Training loops for both tokenizer stages and the mesh transformer,
//! evaluation, ablation/occlusion/noise analyses, checkpointing, and
//! report emission. Everything is single-threaded and seeded: the same
//! config and seed reproduce logs, checkpoints, and reports bit for bit.

mod analysis;
mod checkpoint;
mod data;
mod eval;
mod main_model;
mod report;
mod stage1;
mod stage2;

pub use analysis::{
    noise_sweep, occlusion_sensitivity_map, write_noise_csv, write_noise_svg, write_occmap_csv,
    write_occmap_svg, NoisePoint, OccmapResult,
};
pub use checkpoint::{
    load_model, load_tokenizer, save_model, save_tokenizer, ModelMeta, TokenizerMeta,
};
pub use data::{generate_split, generate_standard_splits, load_split, SplitSpec};
pub use eval::{evaluate_model, write_records_csv, EvalOptions, EvalSummary, PoseSource};
pub use main_model::{train_main, MainReport};
pub use report::{ComparisonRow, ComparisonTable, RunLog};
pub use stage1::{train_tokenizer_stage1, Stage1Report};
pub use stage2::{train_tokenizer_stage2, Stage2Report};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("training diverged at step {step}: {detail}; last good checkpoint retained")]
    Diverged { step: usize, detail: String },
    #[error("incompatible artifact: {0}")]
    Mismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}
