//! Toy humanoid construction and forward-kinematics sampling.
//!
//! The skeleton is a 14-joint tree rooted at the pelvis. Coordinates follow
//! the image convention: +x right, +y down, +z away from the camera; the
//! T-pose template is roughly 1.0 model units tall. Coarse vertices form
//! rings around each joint, skinned rigidly to the joint's rotation; the
//! fine mesh is a fixed convex upsampling of the rings.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::render::{render_image, OccluderSpec, RenderStyle};
use super::ToyBodySample;
use crate::geometry::{orthographic_project, CameraParams, GeometryError, ToyBodyModel};

pub const JOINT_NAMES: [&str; 14] = [
    "pelvis", "neck", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle", "l_shoulder",
    "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
];

/// Secondary rotation axis for a joint's out-of-plane swing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwingAxis {
    X,
    Y,
}

/// Static description of one joint used by the builder and the sampler.
#[derive(Debug, Clone)]
pub struct JointSpec {
    pub name: &'static str,
    pub parent: usize,
    pub rest_dir: [f64; 3],
    pub bone_len: f64,
    pub ring_radius: f64,
    pub ring_size: usize,
    pub swing_axis: SwingAxis,
    /// Limits for the primary (in-plane) angle.
    pub bend_limits: (f64, f64),
    /// Limits for the out-of-plane swing angle.
    pub swing_limits: (f64, f64),
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn joint_table(cfg: &WorldConfig) -> Vec<JointSpec> {
    let small = cfg.ring_size_small;
    let large = cfg.ring_size_large;
    let j = |name, parent, rest: [f64; 3], len: f64, radius: f64, ring, axis, bend, swing| JointSpec {
        name,
        parent,
        rest_dir: if len > 0.0 { norm3(rest) } else { [0.0; 3] },
        bone_len: len,
        ring_radius: radius,
        ring_size: ring,
        swing_axis: axis,
        bend_limits: bend,
        swing_limits: swing,
    };
    vec![
        // The root's "angles" are a global yaw (about y) and roll (about z).
        j("pelvis", 0, [0.0, 0.0, 0.0], 0.0, 0.075, large, SwingAxis::Y, (-0.35, 0.35), (-1.1, 1.1)),
        j("neck", 0, [0.0, -1.0, 0.0], 0.34, 0.06, large, SwingAxis::Y, (-0.3, 0.3), (-0.4, 0.4)),
        j("l_hip", 0, [1.0, 0.3, 0.0], 0.105, 0.05, small, SwingAxis::X, (-0.35, 0.35), (-0.45, 0.45)),
        j("l_knee", 2, [0.0, 1.0, 0.0], 0.26, 0.038, small, SwingAxis::X, (-0.2, 1.3), (-0.35, 0.35)),
        j("l_ankle", 3, [0.0, 1.0, 0.0], 0.25, 0.03, small, SwingAxis::X, (-1.3, 0.15), (-0.3, 0.3)),
        j("r_hip", 0, [-1.0, 0.3, 0.0], 0.105, 0.05, small, SwingAxis::X, (-0.35, 0.35), (-0.45, 0.45)),
        j("r_knee", 5, [0.0, 1.0, 0.0], 0.26, 0.038, small, SwingAxis::X, (-1.3, 0.2), (-0.35, 0.35)),
        j("r_ankle", 6, [0.0, 1.0, 0.0], 0.25, 0.03, small, SwingAxis::X, (-0.15, 1.3), (-0.3, 0.3)),
        j("l_shoulder", 1, [1.0, 0.25, 0.0], 0.15, 0.045, small, SwingAxis::Y, (-0.9, 1.1), (-0.7, 0.7)),
        j("l_elbow", 8, [1.0, 0.35, 0.0], 0.17, 0.032, small, SwingAxis::Y, (-0.1, 2.0), (-0.5, 0.5)),
        j("l_wrist", 9, [1.0, 0.3, 0.0], 0.16, 0.026, small, SwingAxis::Y, (-0.4, 0.4), (-0.3, 0.3)),
        j("r_shoulder", 1, [-1.0, 0.25, 0.0], 0.15, 0.045, small, SwingAxis::Y, (-1.1, 0.9), (-0.7, 0.7)),
        j("r_elbow", 11, [-1.0, 0.35, 0.0], 0.17, 0.032, small, SwingAxis::Y, (-2.0, 0.1), (-0.5, 0.5)),
        j("r_wrist", 12, [-1.0, 0.3, 0.0], 0.16, 0.026, small, SwingAxis::Y, (-0.4, 0.4), (-0.3, 0.3)),
    ]
}

/// Toy-world configuration: mesh resolution, image size, and augmentation
/// knobs used at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub ring_size_small: usize,
    pub ring_size_large: usize,
    /// Fine vertices emitted per coarse vertex (fixed subdivision pattern).
    pub fine_per_coarse: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Probability that a generated sample carries an occluder patch.
    pub occlusion_prob: f64,
    /// Occluder side as a fraction of the frame, sampled uniformly.
    pub occluder_side: (f64, f64),
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            ring_size_small: 3,
            ring_size_large: 6,
            fine_per_coarse: 4,
            image_h: 64,
            image_w: 64,
            occlusion_prob: 0.5,
            occluder_side: (0.25, 0.5),
        }
    }
}

impl WorldConfig {
    pub fn coarse_count(&self) -> usize {
        12 * self.ring_size_small + 2 * self.ring_size_large
    }

    pub fn fine_count(&self) -> usize {
        self.coarse_count() * self.fine_per_coarse
    }
}

/// Build the articulated toy body model: skeleton, vertex rings, upsampler,
/// joint regressor, and adjacency.
pub fn build_toy_model(cfg: &WorldConfig) -> Result<ToyBodyModel, GeometryError> {
    if cfg.ring_size_small < 3 || cfg.ring_size_large < 3 {
        return Err(GeometryError::Degenerate("ring sizes must be >= 3"));
    }
    if cfg.fine_per_coarse != 4 {
        return Err(GeometryError::Degenerate(
            "subdivision pattern is fixed at 4 fine vertices per coarse vertex",
        ));
    }
    let joints = joint_table(cfg);
    let k = joints.len();
    let q = cfg.coarse_count();
    let m = cfg.fine_count();

    // Ring vertex layout: contiguous per joint, in joint order.
    let mut vertex_owner = Vec::with_capacity(q);
    let mut vertex_offsets = Vec::with_capacity(q);
    let mut ring_start = vec![0usize; k];
    for (ji, spec) in joints.iter().enumerate() {
        ring_start[ji] = vertex_owner.len();
        // Ring axis: perpendicular plane to the bone direction (legs/torso
        // use the xz-plane; the exact plane only needs a zero centroid).
        let axis = if spec.bone_len > 0.0 {
            spec.rest_dir
        } else {
            [0.0, -1.0, 0.0]
        };
        let (u, v) = perpendicular_basis(axis);
        for t in 0..spec.ring_size {
            let phi = std::f64::consts::TAU * t as f64 / spec.ring_size as f64;
            let (c, s) = (phi.cos(), phi.sin());
            vertex_owner.push(ji);
            vertex_offsets.push([
                spec.ring_radius * (c * u[0] + s * v[0]),
                spec.ring_radius * (c * u[1] + s * v[1]),
                spec.ring_radius * (c * u[2] + s * v[2]),
            ]);
        }
    }

    // Upsampler: per coarse vertex, one copy row plus three convex blends
    // toward the ring neighbor and the matching vertex of the parent ring.
    let ring_of = |vi: usize| -> (usize, usize, usize) {
        let ji = vertex_owner[vi];
        (ji, ring_start[ji], joints[ji].ring_size)
    };
    let mut upsampler = Array2::zeros((m, q));
    for vi in 0..q {
        let (ji, start, size) = ring_of(vi);
        let next = start + (vi - start + 1) % size;
        let parent = joints[ji].parent;
        let partner = if parent == ji {
            start + (vi - start + 2) % size
        } else {
            ring_start[parent] + (vi - start) % joints[parent].ring_size
        };
        let base = vi * cfg.fine_per_coarse;
        upsampler[(base, vi)] = 1.0;
        upsampler[(base + 1, vi)] = 0.5;
        upsampler[(base + 1, next)] = 0.5;
        upsampler[(base + 2, vi)] = 0.75;
        upsampler[(base + 2, next)] += 0.25;
        upsampler[(base + 3, vi)] = 0.5;
        upsampler[(base + 3, partner)] += 0.5;
    }

    // Joint regressor: uniform average over the copy rows of each ring. The
    // ring offsets have a zero centroid, so the regressed joint is exact.
    let mut regressor = Array2::zeros((k, m));
    for ji in 0..k {
        let size = joints[ji].ring_size;
        for t in 0..size {
            let vi = ring_start[ji] + t;
            regressor[(ji, vi * cfg.fine_per_coarse)] = 1.0 / size as f64;
        }
    }

    // Adjacency: ring cycle edges plus one edge to the matching vertex of the
    // parent ring.
    let mut adjacency = Array2::zeros((q, q));
    for vi in 0..q {
        let (ji, start, size) = ring_of(vi);
        let next = start + (vi - start + 1) % size;
        if next != vi {
            adjacency[(vi, next)] = 1.0;
            adjacency[(next, vi)] = 1.0;
        }
        let parent = joints[ji].parent;
        if parent != ji {
            let partner = ring_start[parent] + (vi - start) % joints[parent].ring_size;
            adjacency[(vi, partner)] = 1.0;
            adjacency[(partner, vi)] = 1.0;
        }
    }

    let model = ToyBodyModel {
        joint_count: k,
        coarse_vertex_count: q,
        fine_vertex_count: m,
        joint_regressor: regressor,
        upsampler,
        adjacency,
        skeleton_parents: joints.iter().map(|j| j.parent).collect(),
        bone_lengths: joints.iter().map(|j| j.bone_len).collect(),
        rest_directions: joints.iter().map(|j| j.rest_dir).collect(),
        vertex_owner,
        vertex_offsets,
    };
    model.validate()?;
    Ok(model)
}

fn perpendicular_basis(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = norm3(axis);
    let helper = if a[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = norm3(cross(a, helper));
    let v = cross(a, u);
    (u, v)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += a[i][k] * v[k];
        }
    }
    out
}

fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Forward kinematics: joint positions and accumulated rotations for the
/// given `[K, 2]` angles (primary bend about z, secondary swing about the
/// joint's swing axis; the root uses roll/yaw).
pub fn forward_kinematics(
    cfg: &WorldConfig,
    pose: &Array2<f64>,
    shape_scale: f64,
) -> (Vec<[f64; 3]>, Vec<Mat3>) {
    let joints = joint_table(cfg);
    let k = joints.len();
    assert_eq!(pose.dim(), (k, 2), "pose parameter shape");
    let mut positions = vec![[0.0; 3]; k];
    let mut rotations = vec![[[0.0; 3]; 3]; k];
    for (ji, spec) in joints.iter().enumerate() {
        let bend = pose[(ji, 0)];
        let swing = pose[(ji, 1)];
        let local = match spec.swing_axis {
            SwingAxis::X => mat_mul(&rot_z(bend), &rot_x(swing)),
            SwingAxis::Y => mat_mul(&rot_z(bend), &rot_y(swing)),
        };
        if ji == 0 {
            positions[0] = [0.0; 3];
            rotations[0] = local;
            continue;
        }
        let parent_rot = rotations[spec.parent];
        let rot = mat_mul(&parent_rot, &local);
        let bone = mat_vec(
            &rot,
            [
                spec.rest_dir[0] * spec.bone_len * shape_scale,
                spec.rest_dir[1] * spec.bone_len * shape_scale,
                spec.rest_dir[2] * spec.bone_len * shape_scale,
            ],
        );
        positions[ji] = [
            positions[spec.parent][0] + bone[0],
            positions[spec.parent][1] + bone[1],
            positions[spec.parent][2] + bone[2],
        ];
        rotations[ji] = rot;
    }
    (positions, rotations)
}

fn skin_coarse(
    model: &ToyBodyModel,
    positions: &[[f64; 3]],
    rotations: &[Mat3],
    shape_scale: f64,
) -> Array2<f64> {
    let q = model.coarse_vertex_count;
    let mut coarse = Array2::zeros((q, 3));
    for vi in 0..q {
        let ji = model.vertex_owner[vi];
        let off = model.vertex_offsets[vi];
        let rotated = mat_vec(
            &rotations[ji],
            [
                off[0] * shape_scale,
                off[1] * shape_scale,
                off[2] * shape_scale,
            ],
        );
        for c in 0..3 {
            coarse[(vi, c)] = positions[ji][c] + rotated[c];
        }
    }
    coarse
}

fn sample_pose(cfg: &WorldConfig, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let joints = joint_table(cfg);
    let mut pose = Array2::zeros((joints.len(), 2));
    for (ji, spec) in joints.iter().enumerate() {
        pose[(ji, 0)] = rng.gen_range(spec.bend_limits.0..spec.bend_limits.1);
        pose[(ji, 1)] = rng.gen_range(spec.swing_limits.0..spec.swing_limits.1);
    }
    pose
}

/// Draw a pose, run forward kinematics, pick a framing camera, and render.
/// A fixed seed reproduces the sample bit for bit.
pub fn sample_body(
    model: &ToyBodyModel,
    rng: &mut ChaCha20Rng,
    cfg: &WorldConfig,
) -> ToyBodySample {
    let shape_scale = rng.gen_range(0.92..1.08);
    let pose = sample_pose(cfg, rng);
    build_sample(model, cfg, pose, shape_scale, rng)
}

/// Deterministic sample construction from explicit pose parameters.
pub fn build_sample(
    model: &ToyBodyModel,
    cfg: &WorldConfig,
    pose: Array2<f64>,
    shape_scale: f64,
    rng: &mut ChaCha20Rng,
) -> ToyBodySample {
    let (positions, rotations) = forward_kinematics(cfg, &pose, shape_scale);
    let coarse = skin_coarse(model, &positions, &rotations, shape_scale);
    let fine = model.upsampler.dot(&coarse);
    let joints3d = model.joint_regressor.dot(&fine);

    // Frame the body: scale to a target occupancy, center with jitter, then
    // clamp so every vertex projects inside the frame with a margin.
    let occupancy = rng.gen_range(0.55..0.80);
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in fine.rows() {
        lo_x = lo_x.min(row[0]);
        hi_x = hi_x.max(row[0]);
        lo_y = lo_y.min(row[1]);
        hi_y = hi_y.max(row[1]);
    }
    let extent = (hi_x - lo_x).max(hi_y - lo_y).max(1e-6);
    let scale = occupancy / extent;
    let center = [(lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0];
    let jitter = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let mut translation = [
        0.5 - scale * center[0] + jitter[0],
        0.5 - scale * center[1] + jitter[1],
    ];
    let margin = 0.02;
    for (axis, (lo, hi)) in [(0usize, (lo_x, hi_x)), (1usize, (lo_y, hi_y))] {
        let min_t = margin - scale * lo;
        let max_t = (1.0 - margin) - scale * hi;
        translation[axis] = translation[axis].clamp(min_t.min(max_t), max_t.max(min_t));
    }
    let camera = CameraParams {
        scale,
        translation,
    };

    let joints2d = orthographic_project(&joints3d, &camera).expect("finite joints");
    let visibility = vec![true; model.joint_count];
    let style = RenderStyle::sample(rng);
    let image = render_image(&joints2d, &camera, shape_scale, model, &style, cfg);

    ToyBodySample {
        pose_params: pose,
        shape_scale,
        fine_vertices: fine,
        joints3d,
        joints2d,
        visibility,
        camera,
        image,
        image_h: cfg.image_h,
        image_w: cfg.image_w,
        occluder: None,
    }
}

/// Sample an occluder rectangle centered inside the body's bounding box.
pub fn sample_occluder(
    sample: &ToyBodySample,
    rng: &mut ChaCha20Rng,
    cfg: &WorldConfig,
) -> OccluderSpec {
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in sample.joints2d.rows() {
        lo_x = lo_x.min(row[0]);
        hi_x = hi_x.max(row[0]);
        lo_y = lo_y.min(row[1]);
        hi_y = hi_y.max(row[1]);
    }
    let side = rng.gen_range(cfg.occluder_side.0..cfg.occluder_side.1);
    OccluderSpec {
        center: [rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y)],
        size: [side, side],
        noise_fill: rng.gen_bool(0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::regress_joints;
    use rand::SeedableRng;

    #[test]
    fn builder_produces_row_stochastic_maps() {
        let model = build_toy_model(&WorldConfig::default()).unwrap();
        for row in model.upsampler.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        for row in model.joint_regressor.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_count_is_fourteen() {
        let model = build_toy_model(&WorldConfig::default()).unwrap();
        assert_eq!(model.joint_count, 14);
        assert_eq!(model.coarse_vertex_count, 48);
        assert_eq!(model.fine_vertex_count, 192);
    }

    #[test]
    fn template_joints_regress_exactly() {
        // Regressing the skinned template must reproduce FK joints.
        let cfg = WorldConfig::default();
        let model = build_toy_model(&cfg).unwrap();
        let pose = Array2::zeros((model.joint_count, 2));
        let (positions, rotations) = forward_kinematics(&cfg, &pose, 1.0);
        let coarse = skin_coarse(&model, &positions, &rotations, 1.0);
        let fine = model.upsampler.dot(&coarse);
        let joints = regress_joints(&fine, &model).unwrap();
        for (ji, pos) in positions.iter().enumerate() {
            for c in 0..3 {
                assert!(
                    (joints[(ji, c)] - pos[c]).abs() < 1e-6,
                    "joint {ji} axis {c}: {} vs {}",
                    joints[(ji, c)],
                    pos[c]
                );
            }
        }
    }

    #[test]
    fn template_is_about_one_unit_tall() {
        let cfg = WorldConfig::default();
        let pose = Array2::zeros((14, 2));
        let (positions, _) = forward_kinematics(&cfg, &pose, 1.0);
        let lo = positions.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let hi = positions
            .iter()
            .map(|p| p[1])
            .fold(f64::NEG_INFINITY, f64::max);
        let height = hi - lo;
        assert!((0.8..1.2).contains(&height), "height {height}");
    }

    #[test]
    fn zero_pose_is_canonical_t_pose() {
        let cfg = WorldConfig::default();
        let pose = Array2::zeros((14, 2));
        let (positions, _) = forward_kinematics(&cfg, &pose, 1.0);
        // Arms horizontal-ish: wrists far out in +/-x, ankles straight down.
        assert!(positions[10][0] > 0.3, "l_wrist x {}", positions[10][0]);
        assert!(positions[13][0] < -0.3, "r_wrist x {}", positions[13][0]);
        assert!(positions[4][1] > 0.4, "l_ankle y {}", positions[4][1]);
        assert!((positions[4][0] - 0.1).abs() < 0.05);
    }

    #[test]
    fn fixed_seed_reproduces_sample_bitwise() {
        let cfg = WorldConfig::default();
        let model = build_toy_model(&cfg).unwrap();
        let gen = || {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            sample_body(&model, &mut rng, &cfg)
        };
        let a = gen();
        let b = gen();
        assert!(a
            .image
            .iter()
            .zip(b.image.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.joints3d, b.joints3d);
        assert_eq!(a.camera, b.camera);
    }

    #[test]
    fn annotations_are_self_consistent() {
        let cfg = WorldConfig::default();
        let model = build_toy_model(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = sample_body(&model, &mut rng, &cfg);
            let joints = regress_joints(&s.fine_vertices, &model).unwrap();
            for (a, b) in joints.iter().zip(s.joints3d.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
            let projected = orthographic_project(&s.joints3d, &s.camera).unwrap();
            for (a, b) in projected.iter().zip(s.joints2d.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joints_project_inside_unit_square() {
        let cfg = WorldConfig::default();
        let model = build_toy_model(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = sample_body(&model, &mut rng, &cfg);
            for row in s.joints2d.rows() {
                assert!(row[0] >= 0.0 && row[0] <= 1.0, "x {}", row[0]);
                assert!(row[1] >= 0.0 && row[1] <= 1.0, "y {}", row[1]);
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = WorldConfig {
            ring_size_small: 2,
            ..WorldConfig::default()
        };
        assert!(build_toy_model(&cfg).is_err());
    }
}
