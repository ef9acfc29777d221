use pmk_core::model::{MeshTransformer, ModelConfig, PoseInput};
use pmk_core::nn::Mode;
use pmk_core::synth::{build_toy_model, sample_body, WorldConfig};
use pmk_core::tokenizer::{PoseTokenizer, TokenizerConfig};
use pmk_core::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn main() {
    let world = WorldConfig::default();
    let body = build_toy_model(&world).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let model = MeshTransformer::init(ModelConfig::default(), &body, &mut rng).unwrap();
    let tok = PoseTokenizer::init(TokenizerConfig::default(), &mut rng);
    let s = sample_body(&body, &mut rng, &world);
    println!("model params: {}", model.params.coord_count());

    // tokenizer classify speed
    let t0 = Instant::now();
    let mut out = tok.tokenize_image(&s.image);
    for _ in 0..9 { out = tok.tokenize_image(&s.image); }
    println!("tokenize_image: {:?}/call", t0.elapsed() / 10);

    // model forward (eval)
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = model.predict(Some(&s.image), PoseInput::Tokens { tokens: &out.pose_tokens, confidence: &out.confidence }, &body).unwrap();
    }
    println!("model fwd eval: {:?}/call", t0.elapsed() / 10);

    // full fwd+bwd
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g, true);
        let nodes = model.forward_graph(&mut g, &bind, Some(&s.image), PoseInput::Tokens { tokens: &out.pose_tokens, confidence: &out.confidence }, &body, &mut Mode::Eval).unwrap();
        let v = pmk_core::losses::vertex_loss(&mut g, nodes.fine, &s.fine_vertices).unwrap();
        let j3 = pmk_core::losses::joint3d_loss(&mut g, nodes.joints_from_mesh, nodes.joints_from_tokens, &s.joints3d).unwrap();
        let j2 = pmk_core::losses::joint2d_loss(&mut g, nodes.joints_from_mesh, nodes.joints_from_tokens, nodes.cam_scale, nodes.cam_translation, &s.joints2d, &s.visibility).unwrap();
        let total = pmk_core::losses::total_loss(&mut g, pmk_core::losses::LossNodes { vertex: v, joint3d: j3, joint2d: j2 }, &Default::default()).unwrap();
        let mut grads = g.backward(total);
        let _ = bind.grads(&mut grads);
    }
    println!("model fwd+bwd+grads: {:?}/call", t0.elapsed() / 10);

    // tokenizer stage-1 style fwd+bwd (encoder+decoder)
    let t0 = Instant::now();
    for _ in 0..50 {
        let mut g = Graph::new();
        let bind = tok.encoder_params.bind(&mut g, true);
        let c = g.constant(s.joints2d.clone());
        let t = tok.encoder.forward(&mut g, &bind, c, &mut Mode::Eval);
        let (z, _idx) = pmk_core::tokenizer::quantize(g.value(t), &tok.codebook);
        let zn = g.straight_through(t, z);
        let dbind = tok.decoder_params.bind(&mut g, true);
        let rec = tok.decoder.forward(&mut g, &dbind, zn, &mut Mode::Eval);
        let gt = g.constant(s.joints2d.clone());
        let diff = g.sub(rec, gt);
        let l1 = g.abs(diff);
        let loss = g.mean_all(l1);
        let mut grads = g.backward(loss);
        let _ = bind.grads(&mut grads);
    }
    println!("stage1 fwd+bwd: {:?}/call", t0.elapsed() / 50);

    // classifier fwd+bwd
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let bind = tok.classifier_params.bind(&mut g, true);
        let img = g.constant(s.image.clone());
        let logits = tok.classifier.forward(&mut g, &bind, img, &mut Mode::Eval);
        let loss = g.cross_entropy_mean(logits, &[0,1,2,3,4,5,6,7]);
        let mut grads = g.backward(loss);
        let _ = bind.grads(&mut grads);
    }
    println!("classifier fwd+bwd: {:?}/call", t0.elapsed() / 10);
}
