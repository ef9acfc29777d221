//! Body-model containers, weak-perspective projection, mesh/joint linear
//! maps, Procrustes alignment, and the evaluation metrics.
//!
//! Conventions: the toy world measures lengths in model units with a body
//! height of 1.0; metric reports multiply by 1000 ("milli-units"). MPJPE and
//! MPVPE are computed after root-joint (pelvis) alignment; PA-MPJPE applies
//! a full similarity alignment with reflections excluded.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{context}: expected {expected} rows, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
}

/// Weak-perspective camera: `p2d = s * drop_z(p3d) + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl CameraParams {
    pub fn identity() -> Self {
        CameraParams {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }
}

/// 2D keypoints in normalized crop coordinates with per-joint visibility.
#[derive(Debug, Clone)]
pub struct Pose2D {
    /// `[J, 2]` coordinates, normalized to the unit square over the crop.
    pub coords: Array2<f64>,
    pub visibility: Vec<bool>,
}

impl Pose2D {
    pub fn new(coords: Array2<f64>, visibility: Vec<bool>) -> Result<Self, GeometryError> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose coordinates"));
        }
        if coords.nrows() != visibility.len() {
            return Err(GeometryError::DimensionMismatch {
                context: "pose visibility",
                expected: coords.nrows(),
                actual: visibility.len(),
            });
        }
        Ok(Pose2D { coords, visibility })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.nrows()
    }
}

/// Articulated toy body: skeleton tree, coarse/fine mesh templates, and the
/// fixed linear maps between them.
#[derive(Debug, Clone)]
pub struct ToyBodyModel {
    /// Joint count K.
    pub joint_count: usize,
    /// Coarse vertex count Q.
    pub coarse_vertex_count: usize,
    /// Fine vertex count M.
    pub fine_vertex_count: usize,
    /// `[K, M]` row-stochastic joint regressor.
    pub joint_regressor: Array2<f64>,
    /// `[M, Q]` row-stochastic mesh upsampler.
    pub upsampler: Array2<f64>,
    /// `[Q, Q]` symmetric 0/1 vertex adjacency with zero diagonal.
    pub adjacency: Array2<f64>,
    /// Parent index per joint; the root (pelvis, index 0) is its own parent.
    pub skeleton_parents: Vec<usize>,
    /// Bone length from each joint to its parent, in model units.
    pub bone_lengths: Vec<f64>,
    /// Rest-pose direction of each bone (unit vector from parent).
    pub rest_directions: Vec<[f64; 3]>,
    /// Coarse-vertex ring membership: owning joint per coarse vertex.
    pub vertex_owner: Vec<usize>,
    /// Rest-pose offsets of coarse vertices relative to their owning joint.
    pub vertex_offsets: Vec<[f64; 3]>,
}

impl ToyBodyModel {
    /// Structural invariants: row-stochastic maps, symmetric adjacency, and
    /// a parent tree rooted at the pelvis.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let check_rows = |m: &Array2<f64>, name: &'static str| -> Result<(), GeometryError> {
            for row in m.rows() {
                if row.iter().any(|&v| v < 0.0) {
                    return Err(GeometryError::Degenerate(name));
                }
                if (row.sum() - 1.0).abs() > 1e-9 {
                    return Err(GeometryError::Degenerate(name));
                }
            }
            Ok(())
        };
        check_rows(&self.joint_regressor, "joint regressor rows must be convex")?;
        check_rows(&self.upsampler, "upsampler rows must be convex")?;
        let a = &self.adjacency;
        for i in 0..a.nrows() {
            if a[(i, i)] != 0.0 {
                return Err(GeometryError::Degenerate("adjacency diagonal"));
            }
            for j in 0..a.ncols() {
                if a[(i, j)] != a[(j, i)] || (a[(i, j)] != 0.0 && a[(i, j)] != 1.0) {
                    return Err(GeometryError::Degenerate("adjacency symmetry"));
                }
            }
        }
        if self.skeleton_parents[0] != 0 {
            return Err(GeometryError::Degenerate("root must be its own parent"));
        }
        for (j, &p) in self.skeleton_parents.iter().enumerate().skip(1) {
            if p >= j {
                return Err(GeometryError::Degenerate(
                    "parents must precede children (tree order)",
                ));
            }
        }
        Ok(())
    }
}

/// Apply the weak-perspective projection to a `[K, 3]` joint set.
pub fn orthographic_project(
    joints3d: &Array2<f64>,
    cam: &CameraParams,
) -> Result<Array2<f64>, GeometryError> {
    if joints3d.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("joints3d"));
    }
    let k = joints3d.nrows();
    let mut out = Array2::zeros((k, 2));
    for i in 0..k {
        out[(i, 0)] = cam.scale * joints3d[(i, 0)] + cam.translation[0];
        out[(i, 1)] = cam.scale * joints3d[(i, 1)] + cam.translation[1];
    }
    Ok(out)
}

/// `J = M_J V` for fine vertices `[M, 3]`.
pub fn regress_joints(
    vertices: &Array2<f64>,
    model: &ToyBodyModel,
) -> Result<Array2<f64>, GeometryError> {
    if vertices.nrows() != model.fine_vertex_count {
        return Err(GeometryError::DimensionMismatch {
            context: "regress_joints vertices",
            expected: model.fine_vertex_count,
            actual: vertices.nrows(),
        });
    }
    Ok(model.joint_regressor.dot(vertices))
}

/// `V_f = U V_c` for coarse vertices `[Q, 3]`.
pub fn upsample_mesh(
    coarse: &Array2<f64>,
    model: &ToyBodyModel,
) -> Result<Array2<f64>, GeometryError> {
    if coarse.nrows() != model.coarse_vertex_count {
        return Err(GeometryError::DimensionMismatch {
            context: "upsample_mesh coarse vertices",
            expected: model.coarse_vertex_count,
            actual: coarse.nrows(),
        });
    }
    Ok(model.upsampler.dot(coarse))
}

/// Closed-form similarity alignment of `pred` onto `gt` (least-squares over
/// rotation, isotropic scale, translation; reflections excluded).
pub fn procrustes_align(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
) -> Result<Array2<f64>, GeometryError> {
    if pred.dim() != gt.dim() {
        return Err(GeometryError::DimensionMismatch {
            context: "procrustes point sets",
            expected: gt.nrows(),
            actual: pred.nrows(),
        });
    }
    let k = pred.nrows();
    if k < 3 {
        return Err(GeometryError::Degenerate("need at least 3 points"));
    }
    let centroid = |m: &Array2<f64>| -> Array1<f64> { m.mean_axis(ndarray::Axis(0)).unwrap() };
    let cp = centroid(pred);
    let cg = centroid(gt);
    let pc = pred - &cp.clone().insert_axis(ndarray::Axis(0));
    let gc = gt - &cg.clone().insert_axis(ndarray::Axis(0));

    let pred_var: f64 = pc.iter().map(|v| v * v).sum();
    if pred_var < 1e-18 {
        return Err(GeometryError::Degenerate("prediction collapsed to a point"));
    }
    // Singular gt (all points collinear) leaves the rotation under-determined.
    let h = pc.t().dot(&gc); // 3x3 covariance
    let hm = nalgebra::Matrix3::from_fn(|r, c| h[(r, c)]);
    let svd = hm.svd(true, true);
    let u = svd.u.ok_or(GeometryError::Degenerate("svd failed"))?;
    let vt = svd.v_t.ok_or(GeometryError::Degenerate("svd failed"))?;
    if svd.singular_values[1] < 1e-12 {
        return Err(GeometryError::Degenerate(
            "ground-truth points are (near-)collinear",
        ));
    }
    let mut d = nalgebra::Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose(); // maps pred -> gt frame
    let trace_sd = svd.singular_values[0] * d[(0, 0)]
        + svd.singular_values[1] * d[(1, 1)]
        + svd.singular_values[2] * d[(2, 2)];
    let scale = trace_sd / pred_var;

    let mut aligned = Array2::zeros((k, 3));
    for i in 0..k {
        let p = nalgebra::Vector3::new(pc[(i, 0)], pc[(i, 1)], pc[(i, 2)]);
        let q = rot * p * scale;
        aligned[(i, 0)] = q[0] + cg[0];
        aligned[(i, 1)] = q[1] + cg[1];
        aligned[(i, 2)] = q[2] + cg[2];
    }
    Ok(aligned)
}

fn mean_point_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let mut d2 = 0.0;
        for c in 0..a.ncols() {
            let d = a[(i, c)] - b[(i, c)];
            d2 += d * d;
        }
        acc += d2.sqrt();
    }
    acc / n as f64
}

fn root_aligned(points: &Array2<f64>, root: &[f64; 3]) -> Array2<f64> {
    let mut out = points.clone();
    for mut row in out.rows_mut() {
        row[0] -= root[0];
        row[1] -= root[1];
        row[2] -= root[2];
    }
    out
}

/// Aggregate evaluation metrics in milli-units (model units x 1000).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mpvpe: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

impl MetricReport {
    /// Flat `name = value` record consumed by the harness.
    pub fn to_record(&self) -> String {
        format!(
            "mpvpe = {:.6}\nmpjpe = {:.6}\npa_mpjpe = {:.6}\n",
            self.mpvpe, self.mpjpe, self.pa_mpjpe
        )
    }
}

/// MPVPE/MPJPE after pelvis alignment plus Procrustes-aligned MPJPE.
///
/// `pred_vertices` are fine vertices `[M, 3]`; predicted joints are regressed
/// from them through the model.
pub fn compute_metrics(
    pred_vertices: &Array2<f64>,
    gt_vertices: &Array2<f64>,
    gt_joints: &Array2<f64>,
    model: &ToyBodyModel,
) -> Result<MetricReport, GeometryError> {
    if gt_vertices.nrows() != model.fine_vertex_count {
        return Err(GeometryError::DimensionMismatch {
            context: "compute_metrics gt vertices",
            expected: model.fine_vertex_count,
            actual: gt_vertices.nrows(),
        });
    }
    if gt_joints.nrows() != model.joint_count {
        return Err(GeometryError::DimensionMismatch {
            context: "compute_metrics gt joints",
            expected: model.joint_count,
            actual: gt_joints.nrows(),
        });
    }
    let pred_joints = regress_joints(pred_vertices, model)?;
    let pred_root = [pred_joints[(0, 0)], pred_joints[(0, 1)], pred_joints[(0, 2)]];
    let gt_root = [gt_joints[(0, 0)], gt_joints[(0, 1)], gt_joints[(0, 2)]];

    let pj = root_aligned(&pred_joints, &pred_root);
    let gj = root_aligned(gt_joints, &gt_root);
    let pv = root_aligned(pred_vertices, &pred_root);
    let gv = root_aligned(gt_vertices, &gt_root);

    let mpjpe = mean_point_distance(&pj, &gj) * 1000.0;
    let mpvpe = mean_point_distance(&pv, &gv) * 1000.0;
    let pa_mpjpe = match procrustes_align(&pred_joints, gt_joints) {
        Ok(aligned) => mean_point_distance(&aligned, gt_joints) * 1000.0,
        // Degenerate gt: fall back to the root-aligned error.
        Err(_) => mpjpe,
    };
    Ok(MetricReport {
        mpvpe,
        mpjpe,
        pa_mpjpe,
    })
}

/// Per-joint Euclidean errors after pelvis alignment, in milli-units.
pub fn per_joint_errors(
    pred_vertices: &Array2<f64>,
    gt_joints: &Array2<f64>,
    model: &ToyBodyModel,
) -> Result<Vec<f64>, GeometryError> {
    let pred_joints = regress_joints(pred_vertices, model)?;
    let pred_root = [pred_joints[(0, 0)], pred_joints[(0, 1)], pred_joints[(0, 2)]];
    let gt_root = [gt_joints[(0, 0)], gt_joints[(0, 1)], gt_joints[(0, 2)]];
    let pj = root_aligned(&pred_joints, &pred_root);
    let gj = root_aligned(gt_joints, &gt_root);
    Ok((0..model.joint_count)
        .map(|i| {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pj[(i, c)] - gj[(i, c)];
                d2 += d * d;
            }
            d2.sqrt() * 1000.0
        })
        .collect())
}

/// Decoder self-attention mask over `[joints; vertices]` rows: vertex pairs
/// may attend only along mesh edges (plus self); joint rows and columns are
/// unmasked.
pub fn adjacency_to_attention_mask(model: &ToyBodyModel) -> Array2<bool> {
    let k = model.joint_count;
    let q = model.coarse_vertex_count;
    let n = k + q;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j || i < k || j < k {
            true
        } else {
            model.adjacency[(i - k, j - k)] != 0.0
        }
    })
}
