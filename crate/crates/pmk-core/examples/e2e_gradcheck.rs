use ndarray::Array2;
use pmk_core::losses::*;
use pmk_core::model::{MeshTransformer, ModelConfig, PoseInput, Variant};
use pmk_core::nn::{gradcheck, Binding, Mode};
use pmk_core::synth::{build_toy_model, sample_body, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn main() {
    let world = WorldConfig { image_h: 32, image_w: 32, ..WorldConfig::default() };
    let body = build_toy_model(&world).unwrap();
    let cfg = ModelConfig {
        variant: Variant::Fused,
        d_model: 8,
        d_reduced: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_expansion: 2,
        dropout: 0.0,
        pose_mixer_depth: 1,
        backbone_channels: vec![2, 2, 3, 3, 4],
        image_h: 32,
        image_w: 32,
        pose_token_count: 4,
        pose_token_dim: 4,
        joint_count: 14,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let model = MeshTransformer::init(cfg, &body, &mut rng).unwrap();
    println!("toy model params: {} coords", model.params.coord_count());

    let mut srng = ChaCha20Rng::seed_from_u64(12);
    let sample = sample_body(&body, &mut srng, &world);
    let tokens = pmk_core::nn::normal_init(&mut srng, 4, 4, 0.5);
    let conf = Array2::from_elem((4, 1), 1.0);

    let inputs: Vec<Array2<f64>> = (0..model.params.len())
        .map(|i| model.params.value_at(i).clone())
        .collect();
    let t0 = Instant::now();
    let err = gradcheck(
        |g, ids| {
            let bind = Binding::from_ids(ids.to_vec());
            let nodes = model
                .forward_graph(g, &bind, Some(&sample.image),
                    PoseInput::Tokens { tokens: &tokens, confidence: &conf },
                    &body, &mut Mode::Eval)
                .unwrap();
            let lv = vertex_loss(g, nodes.fine, &sample.fine_vertices).unwrap();
            let l3 = joint3d_loss(g, nodes.joints_from_mesh, nodes.joints_from_tokens, &sample.joints3d).unwrap();
            let l2 = joint2d_loss(g, nodes.joints_from_mesh, nodes.joints_from_tokens,
                nodes.cam_scale, nodes.cam_translation, &sample.joints2d, &sample.visibility).unwrap();
            total_loss(g, LossNodes { vertex: lv, joint3d: l3, joint2d: l2 }, &Default::default()).unwrap()
        },
        &inputs,
        1e-5,
    );
    println!("end-to-end gradcheck: max rel err {err:.3e} in {:?}", t0.elapsed());
}
