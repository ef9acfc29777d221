//! Supervision: per-vertex L1, dual-source 3D joint L1, projected 2D joint L1
//! with visibility masking, and their weighted sum.

use ndarray::Array2;
use thiserror::Error;

use crate::tensor::{Graph, NodeId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite loss component {component}: {value}")]
    NonFinite { component: &'static str, value: f64 },
}

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint3d: f64,
    pub joint2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vertex: 1000.0,
            joint3d: 1000.0,
            joint2d: 100.0,
        }
    }
}

/// Scalar loss nodes for one sample (pre-weighting).
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub vertex: NodeId,
    pub joint3d: NodeId,
    pub joint2d: NodeId,
}

fn mean_row_l1(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    let rows = g.shape(pred).0 as f64;
    let diff = g.sub(pred, gt);
    let diff = g.abs(diff);
    let total = g.sum_all(diff);
    g.scale(total, 1.0 / rows)
}

fn check_shape(
    context: &'static str,
    actual: (usize, usize),
    expected: (usize, usize),
) -> Result<(), LossError> {
    if actual != expected {
        return Err(LossError::ShapeMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `(1/M) sum_i ||Vhat_i - V_i||_1` over fine vertices.
pub fn vertex_loss(
    g: &mut Graph,
    pred_vertices: NodeId,
    gt_vertices: &Array2<f64>,
) -> Result<NodeId, LossError> {
    check_shape(
        "vertex_loss",
        g.shape(pred_vertices),
        (gt_vertices.nrows(), gt_vertices.ncols()),
    )?;
    let gt = g.constant(gt_vertices.clone());
    Ok(mean_row_l1(g, pred_vertices, gt))
}

/// `(1/K) sum_i (||Jhat_i - J_i||_1 + ||Jbar_i - J_i||_1)`: both joint
/// sources are penalized against the same ground truth.
pub fn joint3d_loss(
    g: &mut Graph,
    joints_from_mesh: NodeId,
    joints_from_tokens: NodeId,
    gt_joints: &Array2<f64>,
) -> Result<NodeId, LossError> {
    let expected = (gt_joints.nrows(), gt_joints.ncols());
    check_shape(
        "joint3d_loss mesh joints",
        g.shape(joints_from_mesh),
        expected,
    )?;
    check_shape(
        "joint3d_loss token joints",
        g.shape(joints_from_tokens),
        expected,
    )?;
    let gt = g.constant(gt_joints.clone());
    let a = mean_row_l1(g, joints_from_mesh, gt);
    let b = mean_row_l1(g, joints_from_tokens, gt);
    Ok(g.add(a, b))
}

/// Weak-perspective projection on the graph: `s * drop_z(J) + t` with
/// `s: [1,1]` and `t: [1,2]` nodes.
pub fn project_graph(g: &mut Graph, joints3d: NodeId, s: NodeId, t: NodeId) -> NodeId {
    let xy = g.slice_cols(joints3d, 0, 2);
    let scaled = g.mul_scalar_node(xy, s);
    g.add_row_bias(scaled, t)
}

/// Projected 2D joint loss: Eq.-3 style projection of both joint sources,
/// with invisible joints excluded from the sum and the denominator.
pub fn joint2d_loss(
    g: &mut Graph,
    joints_from_mesh: NodeId,
    joints_from_tokens: NodeId,
    cam_scale: NodeId,
    cam_translation: NodeId,
    gt_joints2d: &Array2<f64>,
    visibility: &[bool],
) -> Result<NodeId, LossError> {
    let k = gt_joints2d.nrows();
    check_shape("joint2d_loss mesh joints", g.shape(joints_from_mesh), (k, 3))?;
    check_shape(
        "joint2d_loss token joints",
        g.shape(joints_from_tokens),
        (k, 3),
    )?;
    if visibility.len() != k {
        return Err(LossError::ShapeMismatch {
            context: "joint2d_loss visibility",
            expected: (k, 1),
            actual: (visibility.len(), 1),
        });
    }
    let visible = visibility.iter().filter(|&&v| v).count();
    if visible == 0 {
        // Fully occluded: zero loss, zero gradient.
        return Ok(g.constant(Array2::zeros((1, 1))));
    }
    let mask = Array2::from_shape_fn((k, 2), |(i, _)| if visibility[i] { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let gt = g.constant(gt_joints2d.clone());

    let mut total: Option<NodeId> = None;
    for &joints in &[joints_from_mesh, joints_from_tokens] {
        let p2d = project_graph(g, joints, cam_scale, cam_translation);
        let diff = g.sub(p2d, gt);
        let diff = g.abs(diff);
        let masked = g.mul(diff, mask);
        let sum = g.sum_all(masked);
        total = Some(match total {
            Some(t) => g.add(t, sum),
            None => sum,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / visible as f64))
}

/// `a1*L_v + a2*L_3D + a3*L_2D`, rejecting non-finite components so training
/// aborts with the offending term named.
pub fn total_loss(
    g: &mut Graph,
    components: LossNodes,
    weights: &LossWeights,
) -> Result<NodeId, LossError> {
    for (name, node) in [
        ("vertex", components.vertex),
        ("joint3d", components.joint3d),
        ("joint2d", components.joint2d),
    ] {
        let v = g.scalar(node);
        if !v.is_finite() {
            return Err(LossError::NonFinite {
                component: name,
                value: v,
            });
        }
    }
    let v = g.scale(components.vertex, weights.vertex);
    let j3 = g.scale(components.joint3d, weights.joint3d);
    let j2 = g.scale(components.joint2d, weights.joint2d);
    let vj = g.add(v, j3);
    Ok(g.add(vj, j2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(31)
    }

    #[test]
    fn vertex_loss_zero_on_exact_match() {
        let mut g = Graph::new();
        let gt = normal_init(&mut rng(), 12, 3, 1.0);
        let pred = g.leaf(gt.clone());
        let loss = vertex_loss(&mut g, pred, &gt).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn vertex_loss_uniform_offset() {
        let mut g = Graph::new();
        let gt = normal_init(&mut rng(), 10, 3, 1.0);
        let mut shifted = gt.clone();
        for mut row in shifted.rows_mut() {
            row[0] += 0.1;
        }
        let pred = g.leaf(shifted);
        let loss = vertex_loss(&mut g, pred, &gt).unwrap();
        assert!((g.scalar(loss) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn vertex_loss_matches_scalar_double_loop() {
        let mut r = rng();
        let gt = normal_init(&mut r, 9, 3, 1.0);
        let pred = normal_init(&mut r, 9, 3, 1.0);
        let mut g = Graph::new();
        let p = g.leaf(pred.clone());
        let loss = vertex_loss(&mut g, p, &gt).unwrap();
        let mut expect = 0.0;
        for i in 0..9 {
            for c in 0..3 {
                expect += (pred[(i, c)] - gt[(i, c)]).abs();
            }
        }
        expect /= 9.0;
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn vertex_loss_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let pred = g.leaf(Array2::zeros((5, 3)));
        let gt = Array2::zeros((6, 3));
        assert!(matches!(
            vertex_loss(&mut g, pred, &gt),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn joint3d_loss_both_sources_exact_is_zero() {
        let gt = normal_init(&mut rng(), 14, 3, 1.0);
        let mut g = Graph::new();
        let a = g.leaf(gt.clone());
        let b = g.leaf(gt.clone());
        let loss = joint3d_loss(&mut g, a, b, &gt).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn joint3d_loss_single_source_offset() {
        let gt = normal_init(&mut rng(), 14, 3, 1.0);
        let mut shifted = gt.clone();
        for mut row in shifted.rows_mut() {
            row[0] += 0.2;
            row[1] -= 0.1;
        }
        let mut g = Graph::new();
        let a = g.leaf(shifted);
        let b = g.leaf(gt.clone());
        let loss = joint3d_loss(&mut g, a, b, &gt).unwrap();
        // ||delta||_1 = 0.3 from the first source only.
        assert!((g.scalar(loss) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn joint3d_loss_matches_scalar_loop() {
        let mut r = rng();
        let gt = normal_init(&mut r, 14, 3, 1.0);
        let ja = normal_init(&mut r, 14, 3, 1.0);
        let jb = normal_init(&mut r, 14, 3, 1.0);
        let mut g = Graph::new();
        let a = g.leaf(ja.clone());
        let b = g.leaf(jb.clone());
        let loss = joint3d_loss(&mut g, a, b, &gt).unwrap();
        let mut expect = 0.0;
        for i in 0..14 {
            for c in 0..3 {
                expect += (ja[(i, c)] - gt[(i, c)]).abs() + (jb[(i, c)] - gt[(i, c)]).abs();
            }
        }
        expect /= 14.0;
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn joint2d_loss_zero_when_projection_matches() {
        let mut r = rng();
        let j3d = normal_init(&mut r, 14, 3, 0.5);
        let gt2d = j3d.slice(ndarray::s![.., 0..2]).to_owned();
        let mut g = Graph::new();
        let a = g.leaf(j3d.clone());
        let b = g.leaf(j3d.clone());
        let s = g.leaf(Array2::from_elem((1, 1), 1.0));
        let t = g.leaf(Array2::zeros((1, 2)));
        let vis = vec![true; 14];
        let loss = joint2d_loss(&mut g, a, b, s, t, &gt2d, &vis).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn joint2d_loss_translation_offset_counts_both_sources() {
        let mut r = rng();
        let j3d = normal_init(&mut r, 14, 3, 0.5);
        let gt2d = j3d.slice(ndarray::s![.., 0..2]).to_owned();
        let mut g = Graph::new();
        let a = g.leaf(j3d.clone());
        let b = g.leaf(j3d.clone());
        let s = g.leaf(Array2::from_elem((1, 1), 1.0));
        let t = g.leaf(Array2::from_shape_vec((1, 2), vec![0.1, 0.0]).unwrap());
        let vis = vec![true; 14];
        let loss = joint2d_loss(&mut g, a, b, s, t, &gt2d, &vis).unwrap();
        assert!((g.scalar(loss) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn joint2d_camera_gradients_match_finite_differences() {
        let mut r = rng();
        let j3d = normal_init(&mut r, 14, 3, 0.5);
        let gt2d = normal_init(&mut r, 14, 2, 0.5);
        let vis: Vec<bool> = (0..14).map(|i| i % 3 != 0).collect();
        let inputs = vec![
            Array2::from_elem((1, 1), 0.8),
            Array2::from_shape_vec((1, 2), vec![0.05, -0.02]).unwrap(),
        ];
        let err = crate::nn::gradcheck(
            |g, ids| {
                let a = g.constant(j3d.clone());
                let b = g.constant(j3d.clone());
                joint2d_loss(g, a, b, ids[0], ids[1], &gt2d, &vis).unwrap()
            },
            &inputs,
            1e-6,
        );
        assert!(err < 1e-6, "camera gradcheck error {err}");
    }

    #[test]
    fn joint2d_all_invisible_is_zero_with_zero_gradient() {
        let mut r = rng();
        let j3d = normal_init(&mut r, 14, 3, 0.5);
        let gt2d = normal_init(&mut r, 14, 2, 0.5);
        let mut g = Graph::new();
        let a = g.leaf(j3d.clone());
        let b = g.leaf(j3d);
        let s = g.leaf(Array2::from_elem((1, 1), 1.0));
        let t = g.leaf(Array2::zeros((1, 2)));
        let vis = vec![false; 14];
        let loss = joint2d_loss(&mut g, a, b, s, t, &gt2d, &vis).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        let mut grads = g.backward(loss);
        assert!(grads.take(a).is_none());
        assert!(grads.take(s).is_none());
    }

    #[test]
    fn total_loss_paper_weights_arithmetic() {
        let mut g = Graph::new();
        let components = LossNodes {
            vertex: g.leaf(Array2::from_elem((1, 1), 0.001)),
            joint3d: g.leaf(Array2::from_elem((1, 1), 0.002)),
            joint2d: g.leaf(Array2::from_elem((1, 1), 0.005)),
        };
        let loss = total_loss(&mut g, components, &LossWeights::default()).unwrap();
        assert!((g.scalar(loss) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_components() {
        let mut g = Graph::new();
        let z = g.leaf(Array2::zeros((1, 1)));
        let components = LossNodes {
            vertex: z,
            joint3d: z,
            joint2d: z,
        };
        let loss = total_loss(&mut g, components, &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn total_loss_vertex_only_weights() {
        let mut g = Graph::new();
        let components = LossNodes {
            vertex: g.leaf(Array2::from_elem((1, 1), 0.7)),
            joint3d: g.leaf(Array2::from_elem((1, 1), 123.0)),
            joint2d: g.leaf(Array2::from_elem((1, 1), 55.0)),
        };
        let w = LossWeights {
            vertex: 1.0,
            joint3d: 0.0,
            joint2d: 0.0,
        };
        let loss = total_loss(&mut g, components, &w).unwrap();
        assert!((g.scalar(loss) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_each_component() {
        let base = [0.3, 0.9, 1.7];
        let w = LossWeights::default();
        let eval = |v: f64, j3: f64, j2: f64| -> f64 {
            let mut g = Graph::new();
            let components = LossNodes {
                vertex: g.leaf(Array2::from_elem((1, 1), v)),
                joint3d: g.leaf(Array2::from_elem((1, 1), j3)),
                joint2d: g.leaf(Array2::from_elem((1, 1), j2)),
            };
            let loss = total_loss(&mut g, components, &w).unwrap();
            g.scalar(loss)
        };
        let f0 = eval(base[0], base[1], base[2]);
        // Doubling one component adds exactly its weighted value.
        assert!((eval(2.0 * base[0], base[1], base[2]) - f0 - w.vertex * base[0]).abs() < 1e-9);
        assert!((eval(base[0], 2.0 * base[1], base[2]) - f0 - w.joint3d * base[1]).abs() < 1e-9);
        assert!((eval(base[0], base[1], 2.0 * base[2]) - f0 - w.joint2d * base[2]).abs() < 1e-9);
    }

    #[test]
    fn total_loss_rejects_non_finite_component_by_name() {
        let mut g = Graph::new();
        let components = LossNodes {
            vertex: g.leaf(Array2::from_elem((1, 1), 0.1)),
            joint3d: g.leaf(Array2::from_elem((1, 1), f64::NAN)),
            joint2d: g.leaf(Array2::from_elem((1, 1), 0.1)),
        };
        match total_loss(&mut g, components, &LossWeights::default()) {
            Err(LossError::NonFinite { component, .. }) => assert_eq!(component, "joint3d"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn example_offset_arithmetic() {
        // delta = (0.1, 0, 0) on every joint from one source: per-joint L1 is
        // 0.1, the mean stays 0.1.
        let gt = array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 0.5, -1.0]];
        let mut shifted = gt.clone();
        for mut row in shifted.rows_mut() {
            row[0] += 0.1;
        }
        let mut g = Graph::new();
        let a = g.leaf(shifted);
        let b = g.leaf(gt.clone());
        let loss = joint3d_loss(&mut g, a, b, &gt).unwrap();
        assert!((g.scalar(loss) - 0.1).abs() < 1e-12);
    }
}
