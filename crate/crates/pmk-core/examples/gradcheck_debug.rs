use ndarray::Array2;
use pmk_core::losses::*;
use pmk_core::model::{MeshTransformer, ModelConfig, PoseInput, Variant};
use pmk_core::nn::{Binding, Mode};
use pmk_core::synth::{build_toy_model, sample_body, WorldConfig};
use pmk_core::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let world = WorldConfig { image_h: 32, image_w: 32, ..WorldConfig::default() };
    let body = build_toy_model(&world).unwrap();
    let cfg = ModelConfig {
        variant: Variant::Fused, d_model: 8, d_reduced: 4, encoder_layers: 1,
        decoder_layers: 1, heads: 2, ffn_expansion: 2, dropout: 0.0,
        pose_mixer_depth: 1, backbone_channels: vec![2, 2, 3, 3, 4],
        image_h: 32, image_w: 32, pose_token_count: 4, pose_token_dim: 4, joint_count: 14,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let model = MeshTransformer::init(cfg, &body, &mut rng).unwrap();
    let mut srng = ChaCha20Rng::seed_from_u64(12);
    let sample = sample_body(&body, &mut srng, &world);
    let tokens = pmk_core::nn::normal_init(&mut srng, 4, 4, 0.5);
    let conf = Array2::from_elem((4, 1), 1.0);

    let inputs: Vec<Array2<f64>> = (0..model.params.len())
        .map(|i| model.params.value_at(i).clone())
        .collect();
    let build = |g: &mut Graph, ids: &[pmk_core::tensor::NodeId]| {
        let bind = Binding::from_ids(ids.to_vec());
        let nodes = model.forward_graph(g, &bind, Some(&sample.image),
            PoseInput::Tokens { tokens: &tokens, confidence: &conf }, &body, &mut Mode::Eval).unwrap();
        let lv = vertex_loss(g, nodes.fine, &sample.fine_vertices).unwrap();
        let l3 = joint3d_loss(g, nodes.joints_from_mesh, nodes.joints_from_tokens, &sample.joints3d).unwrap();
        let l2 = joint2d_loss(g, nodes.joints_from_mesh, nodes.joints_from_tokens,
            nodes.cam_scale, nodes.cam_translation, &sample.joints2d, &sample.visibility).unwrap();
        total_loss(g, LossNodes { vertex: lv, joint3d: l3, joint2d: l2 }, &Default::default()).unwrap()
    };

    // analytic
    let analytic: Vec<Array2<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &ids);
        let mut grads = g.backward(out);
        ids.iter().zip(inputs.iter()).map(|(&id, v)| grads.get(id, (v.nrows(), v.ncols()))).collect()
    };
    let eval = |probe: &[Array2<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<_> = probe.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &ids);
        g.scalar(out)
    };
    let mut worst: Vec<(f64, usize, usize, usize, f64, f64)> = Vec::new();
    let mut probe = inputs.clone();
    for (ti, input) in inputs.iter().enumerate() {
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let orig = probe[ti][(r, c)];
                let eps = 1e-5;
                probe[ti][(r, c)] = orig + eps;
                let fp = eval(&probe);
                probe[ti][(r, c)] = orig - eps;
                let fm = eval(&probe);
                probe[ti][(r, c)] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[ti][(r, c)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
                worst.push((rel, ti, r, c, a, numeric));
            }
        }
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (rel, ti, r, c, a, n) in worst.iter().take(8) {
        println!("rel {rel:.3e} param {} ({},{}): analytic {a:.8e} numeric {n:.8e}", model.params.name(*ti), r, c);
    }
}
