//! Differentiable building blocks: parameter storage, linear/layer-norm/MLP
//! layers, the MLP-Mixer layer, masked multi-head attention, a
//! finite-difference gradient checker, and AdamW.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::tensor::{Graph, Grads, NodeId};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("attention query row {row} is fully masked; softmax undefined")]
    FullyMaskedRow { row: usize },
}

/// Handle to a parameter slot in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable matrices. Creation order is fixed,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Default, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coord_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_at(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn set_at(&mut self, i: usize, value: Array2<f64>) {
        assert_eq!(self.values[i].dim(), value.dim(), "parameter shape change");
        self.values[i] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Load every parameter onto a graph. Trainable bindings become
    /// differentiable leaves; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let ids = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Binding { ids }
    }

    /// Bit-exact equality of every parameter, for freezing contracts.
    pub fn bits_equal(&self, other: &ParamSet) -> bool {
        if self.names != other.names {
            return false;
        }
        self.values.iter().zip(other.values.iter()).all(|(a, b)| {
            a.dim() == b.dim()
                && a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Per-step mapping from parameters to graph nodes.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    /// Build a binding from externally created leaf nodes (gradcheck).
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Binding { ids }
    }

    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    /// Collect per-parameter gradients (aligned with the ParamSet order).
    pub fn grads(&self, grads: &mut Grads) -> Vec<Option<Array2<f64>>> {
        self.ids.iter().map(|&id| grads.take(id)).collect()
    }
}

/// Forward-pass mode. Training mode owns the RNG that drives dropout so a
/// fixed seed reproduces a step exactly.
pub enum Mode {
    Eval,
    Train(ChaCha20Rng),
}

impl Mode {
    pub fn dropout(&mut self, g: &mut Graph, x: NodeId, rate: f64) -> NodeId {
        match self {
            Mode::Eval => x,
            Mode::Train(_) if rate == 0.0 => x,
            Mode::Train(rng) => {
                let keep = 1.0 - rate;
                let (r, c) = g.shape(x);
                let mask = Array2::from_shape_fn((r, c), |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.dropout_masked(x, mask)
            }
        }
    }
}

pub fn normal_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn xavier_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha20Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.alloc(&format!("{name}.w"), xavier_init(rng, din, dout));
        let b = ps.alloc(&format!("{name}.b"), Array2::zeros((1, dout)));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let y = g.matmul(x, bind.node(self.w));
        g.add_row_bias(y, bind.node(self.b))
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.alloc(&format!("{name}.gamma"), Array2::from_elem((1, d), 1.0));
        let beta = ps.alloc(&format!("{name}.beta"), Array2::zeros((1, d)));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        g.layer_norm_rows(x, bind.node(self.gamma), bind.node(self.beta), self.eps)
    }
}

/// Linear -> GELU -> Dropout -> Linear -> Dropout, applied along the last
/// axis of its input. The caller transposes to pick the mixing axis.
#[derive(Clone, Copy)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl MlpBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        dropout: f64,
    ) -> Self {
        MlpBlock {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), din, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dout),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId, mode: &mut Mode) -> NodeId {
        let h = self.fc1.forward(g, bind, x);
        let h = g.gelu(h);
        let h = mode.dropout(g, h, self.dropout);
        let h = self.fc2.forward(g, bind, h);
        mode.dropout(g, h, self.dropout)
    }
}

/// MLP-Mixer layer: residual token mixing (weights shared across channels)
/// followed by residual channel mixing, each behind a layer norm.
#[derive(Clone, Copy)]
pub struct MixerLayer {
    pub ln_token: LayerNorm,
    pub token_mix: MlpBlock,
    pub ln_channel: LayerNorm,
    pub channel_mix: MlpBlock,
}

impl MixerLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        tokens: usize,
        channels: usize,
        expansion: usize,
        dropout: f64,
    ) -> Self {
        MixerLayer {
            ln_token: LayerNorm::new(ps, &format!("{name}.ln_token"), channels),
            token_mix: MlpBlock::new(
                ps,
                rng,
                &format!("{name}.token_mix"),
                tokens,
                tokens * expansion,
                tokens,
                dropout,
            ),
            ln_channel: LayerNorm::new(ps, &format!("{name}.ln_channel"), channels),
            channel_mix: MlpBlock::new(
                ps,
                rng,
                &format!("{name}.channel_mix"),
                channels,
                channels * expansion,
                channels,
                dropout,
            ),
        }
    }

    /// `x` is `[tokens, channels]`.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId, mode: &mut Mode) -> NodeId {
        let u = self.ln_token.forward(g, bind, x);
        let ut = g.transpose(u);
        let mixed = self.token_mix.forward(g, bind, ut, mode);
        let mixed = g.transpose(mixed);
        let y = g.add(x, mixed);

        let v = self.ln_channel.forward(g, bind, y);
        let mixed = self.channel_mix.forward(g, bind, v, mode);
        g.add(y, mixed)
    }
}

/// Boolean attention mask; `true` marks an allowed key position.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub allowed: Array2<bool>,
}

impl AttnMask {
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttnMask {
            allowed: Array2::from_elem((rows, cols), true),
        }
    }

    fn additive(&self) -> Array2<f64> {
        self.allowed
            .mapv(|a| if a { 0.0 } else { f64::NEG_INFINITY })
    }

    fn fully_masked_row(&self) -> Option<usize> {
        self.allowed
            .rows()
            .into_iter()
            .position(|r| !r.iter().any(|&a| a))
    }
}

/// Multi-head attention with an exact-zero boolean mask. Masking is additive
/// `-inf` before the softmax, which makes disallowed weights exactly 0.
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_head: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(d_model % heads, 0, "head count must divide model width");
        MultiHeadAttention {
            heads,
            d_head: d_model / heads,
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d_model, d_model),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d_model, d_model),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d_model, d_model),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d_model, d_model),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &AttnMask,
    ) -> Result<NodeId, NnError> {
        Ok(self.forward_traced(g, bind, q, k, v, mask)?.0)
    }

    /// Like `forward` but also returns the per-head attention-weight nodes
    /// so callers can inspect the softmax output directly.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        bind: &Binding,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &AttnMask,
    ) -> Result<(NodeId, Vec<NodeId>), NnError> {
        let (a, _) = g.shape(q);
        let (b, _) = g.shape(k);
        assert_eq!(mask.allowed.dim(), (a, b), "mask shape mismatch");
        if let Some(row) = mask.fully_masked_row() {
            return Err(NnError::FullyMaskedRow { row });
        }

        let qp = self.wq.forward(g, bind, q);
        let kp = self.wk.forward(g, bind, k);
        let vp = self.wv.forward(g, bind, v);
        let mask_c = g.constant(mask.additive());
        let scale = 1.0 / (self.d_head as f64).sqrt();

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_nodes = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * self.d_head, self.d_head);
            let kh = g.slice_cols(kp, h * self.d_head, self.d_head);
            let vh = g.slice_cols(vp, h * self.d_head, self.d_head);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask_c);
            let attn = g.softmax_rows(scores);
            attn_nodes.push(attn);
            head_outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&head_outs);
        Ok((self.wo.forward(g, bind, merged), attn_nodes))
    }
}

/// Maximum relative disagreement between reverse-mode and central-difference
/// gradients, over every coordinate of every input.
///
/// The builder must be deterministic at the probe point (dropout disabled).
pub fn gradcheck<F>(build: F, inputs: &[Array2<f64>], eps: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let analytic: Vec<Array2<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &ids);
        let mut grads = g.backward(out);
        ids.iter()
            .zip(inputs.iter())
            .map(|(&id, v)| grads.get(id, (v.nrows(), v.ncols())))
            .collect()
    };

    let eval = |probe: &[Array2<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probe.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &ids);
        g.scalar(out)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Array2<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let orig = probe[ti][(r, c)];
                probe[ti][(r, c)] = orig + eps;
                let fp = eval(&probe);
                probe[ti][(r, c)] = orig - eps;
                let fm = eval(&probe);
                probe[ti][(r, c)] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[ti][(r, c)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// AdamW with decoupled weight decay. Moment buffers follow ParamSet order.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Array2::zeros(params.value_at(i).dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Array2::zeros(params.value_at(i).dim()))
            .collect();
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut p = params.value_at(i).clone();
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
            params.set_at(i, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_gradcheck_is_machine_precision() {
        // Linear map: analytic and numeric agree to FD truncation error.
        let mut ps = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut ps, &mut r, "l", 3, 2);
        let w = ps.value(lin.w).clone();
        let b = ps.value(lin.b).clone();
        let x = normal_init(&mut r, 4, 3, 1.0);
        let err = gradcheck(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let y = g.add_row_bias(y, ids[2]);
                g.sum_all(y)
            },
            &[x, w, b],
            1e-5,
        );
        assert!(err < 1e-9, "linear gradcheck error {err}");
    }

    #[test]
    fn mlp_block_zero_weights_gives_zero_output() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let blk = MlpBlock::new(&mut ps, &mut r, "m", 4, 8, 4, 0.0);
        for i in 0..ps.len() {
            let z = Array2::zeros(ps.value_at(i).dim());
            ps.set_at(i, z);
        }
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let x = g.leaf(normal_init(&mut r, 3, 4, 1.0));
        let y = blk.forward(&mut g, &bind, x, &mut Mode::Eval);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_block_identity_region_tracks_input() {
        // Identity affines, dropout 0, tiny inputs: GELU(x) = x/2 + O(x^2)
        // near zero, so configure fc1 = 2x to land back near identity after
        // halving... instead simply check against the scalar GELU oracle.
        let mut ps = ParamSet::new();
        let mut r = rng();
        let blk = MlpBlock::new(&mut ps, &mut r, "m", 2, 2, 2, 0.0);
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        ps.set_at(0, eye.clone()); // fc1.w
        ps.set_at(2, eye); // fc2.w
        let x = array![[0.01, -0.02], [0.005, 0.0]];
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let y = blk.forward(&mut g, &bind, xn, &mut Mode::Eval);
        for (yv, xv) in g.value(y).iter().zip(x.iter()) {
            assert!((yv - gelu_scalar(*xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_block_is_deterministic_with_dropout_zero() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let blk = MlpBlock::new(&mut ps, &mut r, "m", 5, 10, 5, 0.0);
        let x = normal_init(&mut r, 4, 5, 1.0);
        let run = || {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let xn = g.leaf(x.clone());
            let y = blk.forward(&mut g, &bind, xn, &mut Mode::Eval);
            g.value(y).clone()
        };
        let a = run();
        let b = run();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mixer_zero_mixing_weights_is_identity() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let layer = MixerLayer::new(&mut ps, &mut r, "mix", 4, 6, 2, 0.0);
        for i in 0..ps.len() {
            if ps.name(i).contains("fc") {
                let z = Array2::zeros(ps.value_at(i).dim());
                ps.set_at(i, z);
            }
        }
        let x = normal_init(&mut r, 4, 6, 1.0);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let y = layer.forward(&mut g, &bind, xn, &mut Mode::Eval);
        assert!(g
            .value(y)
            .iter()
            .zip(x.iter())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn mixer_token_mixing_commutes_with_channel_permutation() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let layer = MixerLayer::new(&mut ps, &mut r, "mix", 3, 4, 2, 0.0);
        let x = normal_init(&mut r, 3, 4, 0.5);
        let perm = [2usize, 0, 3, 1];
        let xp = Array2::from_shape_fn((3, 4), |(i, j)| x[(i, perm[j])]);

        let token_half = |input: &Array2<f64>| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let xn = g.leaf(input.clone());
            let u = layer.ln_token.forward(&mut g, &bind, xn);
            let ut = g.transpose(u);
            let mixed = layer
                .token_mix
                .forward(&mut g, &bind, ut, &mut Mode::Eval);
            let mixed = g.transpose(mixed);
            let y = g.add(xn, mixed);
            g.value(y).clone()
        };
        let y = token_half(&x);
        let yp = token_half(&xp);
        for i in 0..3 {
            for j in 0..4 {
                assert!((yp[(i, j)] - y[(i, perm[j])]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixer_gradcheck_passes() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let layer = MixerLayer::new(&mut ps, &mut r, "mix", 4, 8, 2, 0.0);
        let x = normal_init(&mut r, 4, 8, 0.7);
        let mut inputs = vec![x];
        for i in 0..ps.len() {
            inputs.push(ps.value_at(i).clone());
        }
        let err = gradcheck(
            |g, ids| {
                let bind = Binding {
                    ids: ids[1..].to_vec(),
                };
                let y = layer.forward(g, &bind, ids[0], &mut Mode::Eval);
                g.sum_all(y)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "mixer gradcheck error {err}");
    }

    #[test]
    fn attention_diagonal_mask_selects_own_value() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut ps, &mut r, "a", 4, 2);
        let x = normal_init(&mut r, 3, 4, 1.0);
        let mask = AttnMask {
            allowed: Array2::from_shape_fn((3, 3), |(i, j)| i == j),
        };
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let (_, attns) = attn
            .forward_traced(&mut g, &bind, xn, xn, xn, &mask)
            .unwrap();
        for &a in &attns {
            let w = g.value(a);
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_eq!(w[(i, j)], expect);
                }
            }
        }
    }

    #[test]
    fn attention_identical_keys_give_uniform_weights() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut ps, &mut r, "a", 4, 2);
        let q = normal_init(&mut r, 2, 4, 1.0);
        let k = Array2::from_shape_fn((5, 4), |(_, j)| j as f64 * 0.3 - 0.5);
        let mask = AttnMask::all_allowed(2, 5);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let qn = g.leaf(q);
        let kn = g.leaf(k.clone());
        let vn = g.leaf(k);
        let (_, attns) = attn
            .forward_traced(&mut g, &bind, qn, kn, vn, &mask)
            .unwrap();
        for &a in &attns {
            for w in g.value(a).iter() {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_scalar_oracle_agreement() {
        // Single-head 3x2 case against a per-scalar softmax/weighted-sum loop.
        let mut ps = ParamSet::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut ps, &mut r, "a", 2, 1);
        let q = normal_init(&mut r, 3, 2, 1.0);
        let k = normal_init(&mut r, 3, 2, 1.0);
        let v = normal_init(&mut r, 3, 2, 1.0);
        let mask = AttnMask::all_allowed(3, 3);

        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let (qn, kn, vn) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let out = attn.forward(&mut g, &bind, qn, kn, vn, &mask).unwrap();

        let wq = ps.value(attn.wq.w);
        let bq = ps.value(attn.wq.b);
        let wk = ps.value(attn.wk.w);
        let bk = ps.value(attn.wk.b);
        let wv = ps.value(attn.wv.w);
        let bv = ps.value(attn.wv.b);
        let wo = ps.value(attn.wo.w);
        let bo = ps.value(attn.wo.b);
        let proj = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
            let mut y = x.dot(w);
            y += b;
            y
        };
        let (qp, kp, vp) = (proj(&q, wq, bq), proj(&k, wk, bk), proj(&v, wv, bv));
        let scale = 1.0 / (2.0f64).sqrt();
        let mut merged = Array2::zeros((3, 2));
        for i in 0..3 {
            let mut logits = [0.0; 3];
            for j in 0..3 {
                let mut s = 0.0;
                for d in 0..2 {
                    s += qp[(i, d)] * kp[(j, d)];
                }
                logits[j] = s * scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..2 {
                let mut o = 0.0;
                for j in 0..3 {
                    o += exps[j] / z * vp[(j, d)];
                }
                merged[(i, d)] = o;
            }
        }
        let expect = proj(&merged, wo, bo);
        for (a, b) in g.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_fully_masked_row_is_error() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut ps, &mut r, "a", 4, 2);
        let x = normal_init(&mut r, 2, 4, 1.0);
        let mut mask = AttnMask::all_allowed(2, 2);
        mask.allowed[(1, 0)] = false;
        mask.allowed[(1, 1)] = false;
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let xn = g.leaf(x);
        let err = attn.forward(&mut g, &bind, xn, xn, xn, &mask);
        assert!(matches!(err, Err(NnError::FullyMaskedRow { row: 1 })));
    }

    #[test]
    fn attention_permutation_of_keys_and_mask_is_invariant() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut ps, &mut r, "a", 4, 2);
        let q = normal_init(&mut r, 2, 4, 1.0);
        let k = normal_init(&mut r, 4, 4, 1.0);
        let v = normal_init(&mut r, 4, 4, 1.0);
        let mut mask = AttnMask::all_allowed(2, 4);
        mask.allowed[(0, 2)] = false;

        let run = |k: &Array2<f64>, v: &Array2<f64>, mask: &AttnMask| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let (qn, kn, vn) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let out = attn.forward(&mut g, &bind, qn, kn, vn, mask).unwrap();
            g.value(out).clone()
        };
        let base = run(&k, &v, &mask);

        let perm = [3usize, 1, 0, 2];
        let kp = Array2::from_shape_fn((4, 4), |(i, j)| k[(perm[i], j)]);
        let vp = Array2::from_shape_fn((4, 4), |(i, j)| v[(perm[i], j)]);
        let maskp = AttnMask {
            allowed: Array2::from_shape_fn((2, 4), |(i, j)| mask.allowed[(i, perm[j])]),
        };
        let permuted = run(&kp, &vp, &maskp);
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_flags_corrupted_gradient() {
        // A +0.1 perturbation on one coordinate must push the reported error
        // above 1e-2.
        let x = array![[0.3, -0.4], [0.9, 0.2]];
        let clean = gradcheck(
            |g, ids| {
                let y = g.sqr(ids[0]);
                g.sum_all(y)
            },
            &[x.clone()],
            1e-5,
        );
        assert!(clean < 1e-9, "clean error {clean}");

        // Corrupt by adding 0.05*x[0,0] to the loss via a detached constant
        // path: d/dx differs from FD by exactly 0.05 on that coordinate...
        // simpler: compare a wrong analytic formula directly.
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = g.sqr(xn);
        let out = g.sum_all(y);
        let mut grads = g.backward(out);
        let mut analytic = grads.take(xn).unwrap();
        analytic[(0, 0)] += 0.1;
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = x.clone();
        for r in 0..2 {
            for c in 0..2 {
                let orig = probe[(r, c)];
                let f = |p: &Array2<f64>| {
                    let mut g = Graph::new();
                    let xn = g.leaf(p.clone());
                    let y = g.sqr(xn);
                    let s = g.sum_all(y);
                    g.scalar(s)
                };
                probe[(r, c)] = orig + eps;
                let fp = f(&probe);
                probe[(r, c)] = orig - eps;
                let fm = f(&probe);
                probe[(r, c)] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[(r, c)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst > 1e-2, "corruption not flagged: {worst}");
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut ps = ParamSet::new();
        let p = ps.alloc("x", array![[4.0, -3.0]]);
        let mut opt = AdamW::new(&ps, 0.1, 0.9, 0.999, 0.0);
        for _ in 0..200 {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, true);
            let sq = g.sqr(bind.node(p));
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss);
            let gvec = bind.grads(&mut grads);
            opt.step(&mut ps, &gvec);
        }
        assert!(ps.value(p).iter().all(|v| v.abs() < 0.05));
    }
}
