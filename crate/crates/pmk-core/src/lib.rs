//! Desk-scale 3D human mesh recovery from single images, driven by a
//! procedurally generated toy humanoid.
//!
//! The stack has three trained pieces: a two-stage VQ-VAE pose tokenizer, a
//! fusion transformer that decodes joint/vertex tokens into a coarse mesh,
//! and the linear maps that lift coarse vertices to a fine mesh and back to
//! joints. Everything runs on an in-crate `f64` reverse-mode tape, so runs
//! are bit-reproducible single-threaded and every block is gradient-checked
//! against central differences.

pub mod config;
pub mod container;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use config::RunConfig;
pub use geometry::{CameraParams, MetricReport, Pose2D, ToyBodyModel};
pub use tensor::Graph;
