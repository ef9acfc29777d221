//! Two-stage pose tokenizer. Stage one learns a codebook over 2D poses with
//! an MLP-Mixer encoder/decoder and EMA codebook updates; stage two trains an
//! image classifier whose per-token logits select codebook mixtures. Frozen
//! inference is classify -> confidence -> assemble.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Binding, Linear, MixerLayer, Mode, ParamSet};
use crate::tensor::{ConvGeom, Graph, NodeId};

/// Dimensions of the tokenizer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    /// Input joints J.
    pub joint_count: usize,
    /// Token sequence length N (independent of J).
    pub token_count: usize,
    /// Codebook entries V.
    pub codebook_size: usize,
    /// Token width d_p.
    pub token_dim: usize,
    /// Mixer feed-forward expansion.
    pub expansion: usize,
    /// Mixer layers on each side of the token resampling step.
    pub depth: usize,
    pub dropout: f64,
    /// Classifier input size.
    pub image_h: usize,
    pub image_w: usize,
    /// Classifier conv channels, stride 2 each.
    pub classifier_channels: Vec<usize>,
    pub classifier_hidden: usize,
    /// Trunk dropout in stage-two training.
    pub classifier_dropout: f64,
    /// EMA decay lambda.
    pub ema_decay: f64,
    /// Laplace smoothing epsilon.
    pub ema_epsilon: f64,
    /// Commitment weight beta.
    pub commitment_beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            joint_count: 14,
            token_count: 8,
            codebook_size: 64,
            token_dim: 32,
            expansion: 2,
            depth: 2,
            dropout: 0.0,
            image_h: 64,
            image_w: 64,
            classifier_channels: vec![16, 32, 64],
            classifier_hidden: 256,
            classifier_dropout: 0.1,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            commitment_beta: 0.25,
        }
    }
}

/// Learned codebook plus EMA accumulators.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[V, d_p]` entries.
    pub entries: Array2<f64>,
    pub ema_cluster_sizes: Vec<f64>,
    /// `[V, d_p]` running sums.
    pub ema_sums: Array2<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl Codebook {
    pub fn init(cfg: &TokenizerConfig, rng: &mut ChaCha20Rng) -> Self {
        let dist = Normal::new(0.0, 0.5).unwrap();
        let entries =
            Array2::from_shape_fn((cfg.codebook_size, cfg.token_dim), |_| dist.sample(rng));
        Codebook {
            ema_sums: entries.clone(),
            ema_cluster_sizes: vec![1.0; cfg.codebook_size],
            entries,
            decay: cfg.ema_decay,
            epsilon: cfg.ema_epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// Re-seed one entry (dead-entry handling): the entry becomes a fresh
    /// cluster centered on `token`.
    pub fn reseed_entry(&mut self, index: usize, token: &[f64]) {
        for (c, &v) in token.iter().enumerate() {
            self.entries[(index, c)] = v;
            self.ema_sums[(index, c)] = v;
        }
        self.ema_cluster_sizes[index] = 1.0;
    }
}

/// Nearest codebook entry per token row; ties resolve to the lowest index.
pub fn quantize(tokens: &Array2<f64>, codebook: &Codebook) -> (Array2<f64>, Vec<usize>) {
    assert!(!codebook.is_empty(), "codebook must be non-empty");
    assert_eq!(tokens.ncols(), codebook.entries.ncols(), "token width");
    let n = tokens.nrows();
    let mut out = Array2::zeros((n, tokens.ncols()));
    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for v in 0..codebook.len() {
            let mut d = 0.0;
            for c in 0..tokens.ncols() {
                let diff = tokens[(i, c)] - codebook.entries[(v, c)];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        indices.push(best);
        for c in 0..tokens.ncols() {
            out[(i, c)] = codebook.entries[(best, c)];
        }
    }
    (out, indices)
}

/// One EMA codebook update from a batch of assigned tokens:
/// `size_i <- l*size_i + (1-l)*count_i`, `sum_i <- l*sum_i + (1-l)*sum of
/// assigned tokens`, then `entry_i = sum_i / ((size_i + eps) * n/(n + V*eps))`
/// with `n` the total smoothed count.
pub fn ema_update(codebook: &mut Codebook, tokens: &Array2<f64>, indices: &[usize]) {
    assert_eq!(tokens.nrows(), indices.len(), "one index per token");
    let v_count = codebook.len();
    let d = codebook.entries.ncols();
    let lambda = codebook.decay;
    let eps = codebook.epsilon;

    let mut counts = vec![0.0f64; v_count];
    let mut sums = Array2::<f64>::zeros((v_count, d));
    for (row, &idx) in indices.iter().enumerate() {
        counts[idx] += 1.0;
        for c in 0..d {
            sums[(idx, c)] += tokens[(row, c)];
        }
    }
    for i in 0..v_count {
        codebook.ema_cluster_sizes[i] =
            lambda * codebook.ema_cluster_sizes[i] + (1.0 - lambda) * counts[i];
        for c in 0..d {
            codebook.ema_sums[(i, c)] =
                lambda * codebook.ema_sums[(i, c)] + (1.0 - lambda) * sums[(i, c)];
        }
    }
    let total: f64 = codebook.ema_cluster_sizes.iter().sum();
    if total <= 0.0 {
        return;
    }
    let normalizer = total / (total + v_count as f64 * eps);
    for i in 0..v_count {
        let denom = (codebook.ema_cluster_sizes[i] + eps) * normalizer;
        for c in 0..d {
            codebook.entries[(i, c)] = codebook.ema_sums[(i, c)] / denom;
        }
    }
}

/// Canonical tokenizer frame: pelvis-centered crop coordinates divided by
/// the camera scale, i.e. body units. Stage one learns the pose manifold
/// itself rather than where the crop placed the person.
pub fn canonical_pose(
    joints2d: &Array2<f64>,
    camera: &crate::geometry::CameraParams,
) -> Array2<f64> {
    let mut out = joints2d.clone();
    let root = [joints2d[(0, 0)], joints2d[(0, 1)]];
    for mut row in out.rows_mut() {
        row[0] = (row[0] - root[0]) / camera.scale;
        row[1] = (row[1] - root[1]) / camera.scale;
    }
    out
}

/// Per-row maximum logit, the pose confidence.
pub fn extract_confidence(logits: &Array2<f64>) -> Array2<f64> {
    let n = logits.nrows();
    let mut out = Array2::zeros((n, 1));
    for i in 0..n {
        out[(i, 0)] = logits
            .row(i)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
    }
    out
}

/// `softmax(logits) * C`: rows are convex mixtures of codebook entries.
pub fn assemble_pose_tokens(logits: &Array2<f64>, codebook: &Codebook) -> Array2<f64> {
    assert_eq!(logits.ncols(), codebook.len(), "logit width vs codebook");
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    probs.dot(&codebook.entries)
}

/// Graph-level assemble for differentiable paths through the logits.
pub fn assemble_pose_tokens_graph(g: &mut Graph, logits: NodeId, codebook: &Codebook) -> NodeId {
    let probs = g.softmax_rows(logits);
    let entries = g.constant(codebook.entries.clone());
    g.matmul(probs, entries)
}

/// Add seeded element-wise Gaussian noise to the logits.
pub fn corrupt_logits(logits: &Array2<f64>, sigma: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return logits.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    logits.mapv(|v| v + dist.sample(rng))
}

/// MLP-Mixer pose encoder: `[J, 2]` coordinates to `[N, d_p]` tokens.
pub struct PoseEncoder {
    pub embed: Linear,
    pub joint_mixers: Vec<MixerLayer>,
    pub resample: Linear,
    pub token_mixers: Vec<MixerLayer>,
}

impl PoseEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha20Rng, cfg: &TokenizerConfig) -> Self {
        let embed = Linear::new(ps, rng, "enc.embed", 2, cfg.token_dim);
        let joint_mixers = (0..cfg.depth)
            .map(|i| {
                MixerLayer::new(
                    ps,
                    rng,
                    &format!("enc.joint_mixer{i}"),
                    cfg.joint_count,
                    cfg.token_dim,
                    cfg.expansion,
                    cfg.dropout,
                )
            })
            .collect();
        let resample = Linear::new(ps, rng, "enc.resample", cfg.joint_count, cfg.token_count);
        let token_mixers = (0..cfg.depth)
            .map(|i| {
                MixerLayer::new(
                    ps,
                    rng,
                    &format!("enc.token_mixer{i}"),
                    cfg.token_count,
                    cfg.token_dim,
                    cfg.expansion,
                    cfg.dropout,
                )
            })
            .collect();
        PoseEncoder {
            embed,
            joint_mixers,
            resample,
            token_mixers,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        coords: NodeId,
        mode: &mut Mode,
    ) -> NodeId {
        let mut x = self.embed.forward(g, bind, coords);
        for m in &self.joint_mixers {
            x = m.forward(g, bind, x, mode);
        }
        // Token resampling J -> N along the token axis, shared across
        // channels.
        let xt = g.transpose(x);
        let xt = self.resample.forward(g, bind, xt);
        x = g.transpose(xt);
        for m in &self.token_mixers {
            x = m.forward(g, bind, x, mode);
        }
        x
    }

    /// Eval-mode convenience on plain arrays.
    pub fn encode(&self, params: &ParamSet, coords: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let bind = params.bind(&mut g, false);
        let c = g.constant(coords.clone());
        let out = self.forward(&mut g, &bind, c, &mut Mode::Eval);
        g.value(out).clone()
    }
}

/// MLP-Mixer decoder: `[N, d_p]` tokens back to `[J, 2]` coordinates.
pub struct PoseDecoder {
    pub token_mixers: Vec<MixerLayer>,
    pub resample: Linear,
    pub joint_mixers: Vec<MixerLayer>,
    pub head: Linear,
}

impl PoseDecoder {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha20Rng, cfg: &TokenizerConfig) -> Self {
        let token_mixers = (0..cfg.depth)
            .map(|i| {
                MixerLayer::new(
                    ps,
                    rng,
                    &format!("dec.token_mixer{i}"),
                    cfg.token_count,
                    cfg.token_dim,
                    cfg.expansion,
                    cfg.dropout,
                )
            })
            .collect();
        let resample = Linear::new(ps, rng, "dec.resample", cfg.token_count, cfg.joint_count);
        let joint_mixers = (0..cfg.depth)
            .map(|i| {
                MixerLayer::new(
                    ps,
                    rng,
                    &format!("dec.joint_mixer{i}"),
                    cfg.joint_count,
                    cfg.token_dim,
                    cfg.expansion,
                    cfg.dropout,
                )
            })
            .collect();
        PoseDecoder {
            token_mixers,
            resample,
            joint_mixers,
            head: Linear::new(ps, rng, "dec.head", cfg.token_dim, 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, z: NodeId, mode: &mut Mode) -> NodeId {
        let mut x = z;
        for m in &self.token_mixers {
            x = m.forward(g, bind, x, mode);
        }
        let xt = g.transpose(x);
        let xt = self.resample.forward(g, bind, xt);
        x = g.transpose(xt);
        for m in &self.joint_mixers {
            x = m.forward(g, bind, x, mode);
        }
        self.head.forward(g, bind, x)
    }

    pub fn decode(&self, params: &ParamSet, z: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let bind = params.bind(&mut g, false);
        let zn = g.constant(z.clone());
        let out = self.forward(&mut g, &bind, zn, &mut Mode::Eval);
        g.value(out).clone()
    }
}

/// Conv weight/bias parameter pair.
#[derive(Clone, Copy)]
pub struct ConvParams {
    pub w: crate::nn::ParamId,
    pub wi: usize,
    pub b: crate::nn::ParamId,
}

fn conv_init(
    ps: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> ConvParams {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let wi = ps.len();
    let w = ps.alloc(
        &format!("{name}.w"),
        Array2::from_shape_fn((cout, cin * k * k), |_| dist.sample(rng)),
    );
    let b = ps.alloc(&format!("{name}.b"), Array2::zeros((1, cout)));
    ConvParams { w, wi, b }
}

/// Convolutional classifier: image `[3, H*W]` to token logits `[N, V]`.
/// Each token position gets its own head weights; the final projection is
/// zero-initialized so an untrained classifier outputs uniform likelihoods.
pub struct ImageClassifier {
    pub convs: Vec<(ConvParams, ConvGeom)>,
    pub norms: Vec<crate::nn::LayerNorm>,
    pub trunk: Linear,
    pub heads: Linear,
    pub token_count: usize,
    pub codebook_size: usize,
    pub dropout: f64,
}

impl ImageClassifier {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha20Rng, cfg: &TokenizerConfig) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        let mut h = cfg.image_h;
        let mut w = cfg.image_w;
        for (i, &cout) in cfg.classifier_channels.iter().enumerate() {
            let geom = ConvGeom {
                cin,
                h,
                w,
                cout,
                kh: 3,
                kw: 3,
                stride: 2,
                pad: 1,
            };
            convs.push((conv_init(ps, rng, &format!("cls.conv{i}"), cin, cout, 3), geom));
            norms.push(crate::nn::LayerNorm::new(ps, &format!("cls.norm{i}"), cout));
            cin = cout;
            h = geom.out_h();
            w = geom.out_w();
        }
        let flat = cin * h * w;
        let trunk = Linear::new(ps, rng, "cls.trunk", flat, cfg.classifier_hidden);
        let head_out = cfg.token_count * cfg.codebook_size;
        let heads_wi = ps.len();
        let heads = Linear::new(ps, rng, "cls.heads", cfg.classifier_hidden, head_out);
        ps.set_at(heads_wi, Array2::zeros((cfg.classifier_hidden, head_out)));
        ImageClassifier {
            convs,
            norms,
            trunk,
            heads,
            token_count: cfg.token_count,
            codebook_size: cfg.codebook_size,
            dropout: cfg.classifier_dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, image: NodeId, mode: &mut Mode) -> NodeId {
        let mut x = image;
        for ((conv, geom), norm) in self.convs.iter().zip(self.norms.iter()) {
            x = g.conv2d(x, bind.node(conv.w), bind.node(conv.b), *geom);
            // LayerNorm over channels per spatial position; ReLU keeps the
            // conv stack cheap.
            let xt = g.transpose(x);
            let xt = norm.forward(g, bind, xt);
            let xt = g.relu(xt);
            x = g.transpose(xt);
        }
        let (c, hw) = g.shape(x);
        let flat = g.reshape(x, 1, c * hw);
        let f = self.trunk.forward(g, bind, flat);
        let f = g.gelu(f);
        let f = mode.dropout(g, f, self.dropout);
        let logits = self.heads.forward(g, bind, f);
        g.reshape(logits, self.token_count, self.codebook_size)
    }

    pub fn classify(&self, params: &ParamSet, image: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let bind = params.bind(&mut g, false);
        let img = g.constant(image.clone());
        let out = self.forward(&mut g, &bind, img, &mut Mode::Eval);
        g.value(out).clone()
    }
}

/// The full tokenizer: three parameter sets plus the codebook.
pub struct PoseTokenizer {
    pub cfg: TokenizerConfig,
    pub encoder: PoseEncoder,
    pub encoder_params: ParamSet,
    pub decoder: PoseDecoder,
    pub decoder_params: ParamSet,
    pub classifier: ImageClassifier,
    pub classifier_params: ParamSet,
    pub codebook: Codebook,
}

impl PoseTokenizer {
    pub fn init(cfg: TokenizerConfig, rng: &mut ChaCha20Rng) -> Self {
        let mut encoder_params = ParamSet::new();
        let encoder = PoseEncoder::new(&mut encoder_params, rng, &cfg);
        let mut decoder_params = ParamSet::new();
        let decoder = PoseDecoder::new(&mut decoder_params, rng, &cfg);
        let mut classifier_params = ParamSet::new();
        let classifier = ImageClassifier::new(&mut classifier_params, rng, &cfg);
        let codebook = Codebook::init(&cfg, rng);
        PoseTokenizer {
            cfg,
            encoder,
            encoder_params,
            decoder,
            decoder_params,
            classifier,
            classifier_params,
            codebook,
        }
    }

    /// Stage-one labels for a ground-truth pose.
    pub fn labels_for_pose(&self, coords: &Array2<f64>) -> Vec<usize> {
        let tokens = self.encoder.encode(&self.encoder_params, coords);
        quantize(&tokens, &self.codebook).1
    }

    /// Frozen inference: classify the image, then assemble tokens and
    /// confidence from the logits.
    pub fn tokenize_image(&self, image: &Array2<f64>) -> TokenizerOutput {
        let logits = self.classifier.classify(&self.classifier_params, image);
        self.output_from_logits(logits)
    }

    pub fn output_from_logits(&self, logits: Array2<f64>) -> TokenizerOutput {
        let confidence = extract_confidence(&logits);
        let pose_tokens = assemble_pose_tokens(&logits, &self.codebook);
        TokenizerOutput {
            logits,
            pose_tokens,
            confidence,
        }
    }

    /// Quantized ground-truth tokens for an annotated pose, used by the
    /// GT-token pipeline with a fixed confidence of 10.
    pub fn gt_tokens(&self, coords: &Array2<f64>) -> TokenizerOutput {
        let t = self.encoder.encode(&self.encoder_params, coords);
        let (z, indices) = quantize(&t, &self.codebook);
        let mut logits = Array2::zeros((self.cfg.token_count, self.cfg.codebook_size));
        for (row, &i) in indices.iter().enumerate() {
            logits[(row, i)] = 10.0;
        }
        TokenizerOutput {
            logits,
            pose_tokens: z,
            confidence: Array2::from_elem((self.cfg.token_count, 1), 10.0),
        }
    }
}

/// Classifier outputs: logits, assembled tokens, and per-token confidence.
#[derive(Debug, Clone)]
pub struct TokenizerOutput {
    pub logits: Array2<f64>,
    pub pose_tokens: Array2<f64>,
    pub confidence: Array2<f64>,
}
