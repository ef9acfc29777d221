//! Procedurally generated articulated toy humanoid: body-model construction,
//! forward-kinematics sampling, deterministic rendering, occlusion, image
//! augmentation, and the on-disk dataset container.

mod augment;
mod body;
mod dataset;
mod render;

pub use augment::{apply_augment, AugmentParams};
pub use body::{build_sample, build_toy_model, sample_body, sample_occluder, JointSpec, WorldConfig, JOINT_NAMES};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use render::{limb_footprint_mask, occlude, point_in_rect, render_image, OccluderSpec, RenderStyle};

use crate::geometry::CameraParams;
use ndarray::Array2;

/// One fully annotated sample of the toy world.
#[derive(Debug, Clone)]
pub struct ToyBodySample {
    /// Per-joint rotation angles `[K, 2]` (primary bend, out-of-plane swing).
    pub pose_params: Array2<f64>,
    pub shape_scale: f64,
    /// `[M, 3]` fine mesh vertices in model units.
    pub fine_vertices: Array2<f64>,
    /// `[K, 3]` joints; equals `M_J * fine_vertices` by construction.
    pub joints3d: Array2<f64>,
    /// `[K, 2]` ground-truth 2D joints in normalized crop coordinates.
    pub joints2d: Array2<f64>,
    pub visibility: Vec<bool>,
    pub camera: CameraParams,
    /// `[3, H*W]` pixels in `[0, 1]`.
    pub image: Array2<f64>,
    pub image_h: usize,
    pub image_w: usize,
    pub occluder: Option<OccluderSpec>,
}

impl ToyBodySample {
    pub fn is_occluded(&self) -> bool {
        self.occluder.is_some()
    }
}
