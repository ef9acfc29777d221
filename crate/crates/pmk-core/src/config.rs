//! Run configuration: plain `key = value` text with typed parsing,
//! unknown-key rejection, `PMK_`-prefixed environment overrides, and a
//! canonical serialization whose SHA-256 stamps every emitted artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::sha256_hex;
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Variant};
use crate::synth::WorldConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required key `{0}` for this stage")]
    MissingKey(&'static str),
}

/// Everything a run needs. Defaults are the desk-scale configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,

    // Toy world.
    pub image_h: usize,
    pub image_w: usize,
    pub ring_size_small: usize,
    pub ring_size_large: usize,
    pub occlusion_prob: f64,
    pub occluder_side_lo: f64,
    pub occluder_side_hi: f64,

    // Tokenizer dimensions.
    pub tok_joint_count: usize,
    pub tok_token_count: usize,
    pub tok_codebook_size: usize,
    pub tok_token_dim: usize,
    pub tok_expansion: usize,
    pub tok_depth: usize,
    pub tok_classifier_hidden: usize,
    pub tok_classifier_dropout: f64,
    pub tok_ema_decay: f64,
    pub tok_ema_epsilon: f64,
    pub tok_commitment_beta: f64,

    // Mesh transformer dimensions.
    pub model_d: usize,
    pub model_d_reduced: usize,
    pub model_encoder_layers: usize,
    pub model_decoder_layers: usize,
    pub model_heads: usize,
    pub model_ffn_expansion: usize,
    pub model_dropout: f64,
    pub model_pose_mixer_depth: usize,

    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub augment: bool,

    // Losses.
    pub loss_vertex: f64,
    pub loss_joint3d: f64,
    pub loss_joint2d: f64,

    // Variant and analysis knobs.
    pub variant: Variant,
    pub gt_tokens: bool,
    pub noise_sigmas: Vec<f64>,
    pub occmap_grid: usize,
    pub occmap_patch: f64,
    pub occmap_samples: usize,

    // Data generation counts.
    pub gen_train: usize,
    pub gen_val: usize,
    pub gen_test: usize,

    // Paths.
    pub data_train: Option<PathBuf>,
    pub data_val: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub tokenizer_ckpt: Option<PathBuf>,
    pub ckpt_in: Option<PathBuf>,
    pub ckpt_out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            image_h: 64,
            image_w: 64,
            ring_size_small: 3,
            ring_size_large: 6,
            occlusion_prob: 0.5,
            occluder_side_lo: 0.25,
            occluder_side_hi: 0.5,
            tok_joint_count: 14,
            tok_token_count: 8,
            tok_codebook_size: 64,
            tok_token_dim: 32,
            tok_expansion: 2,
            tok_depth: 2,
            tok_classifier_hidden: 256,
            tok_classifier_dropout: 0.1,
            tok_ema_decay: 0.99,
            tok_ema_epsilon: 1e-5,
            tok_commitment_beta: 0.25,
            model_d: 64,
            model_d_reduced: 32,
            model_encoder_layers: 3,
            model_decoder_layers: 3,
            model_heads: 4,
            model_ffn_expansion: 2,
            model_dropout: 0.1,
            model_pose_mixer_depth: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 32,
            steps: 2000,
            log_every: 50,
            eval_every: 500,
            augment: false,
            loss_vertex: 1000.0,
            loss_joint3d: 1000.0,
            loss_joint2d: 100.0,
            variant: Variant::Fused,
            gt_tokens: false,
            noise_sigmas: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            occmap_grid: 8,
            occmap_patch: 0.25,
            occmap_samples: 20,
            gen_train: 2000,
            gen_val: 200,
            gen_test: 200,
            data_train: None,
            data_val: None,
            data_test: None,
            tokenizer_ckpt: None,
            ckpt_in: None,
            ckpt_out: None,
            out_dir: None,
            split: "test".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            value: other.to_string(),
            reason: "expected true/false".into(),
        }),
    }
}

impl RunConfig {
    /// Parse one `key = value` pair into the config.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "world.image_h" => self.image_h = parse_num(key, v)?,
            "world.image_w" => self.image_w = parse_num(key, v)?,
            "world.ring_size_small" => self.ring_size_small = parse_num(key, v)?,
            "world.ring_size_large" => self.ring_size_large = parse_num(key, v)?,
            "world.occlusion_prob" => self.occlusion_prob = parse_num(key, v)?,
            "world.occluder_side_lo" => self.occluder_side_lo = parse_num(key, v)?,
            "world.occluder_side_hi" => self.occluder_side_hi = parse_num(key, v)?,
            "tokenizer.joint_count" => self.tok_joint_count = parse_num(key, v)?,
            "tokenizer.token_count" => self.tok_token_count = parse_num(key, v)?,
            "tokenizer.codebook_size" => self.tok_codebook_size = parse_num(key, v)?,
            "tokenizer.token_dim" => self.tok_token_dim = parse_num(key, v)?,
            "tokenizer.expansion" => self.tok_expansion = parse_num(key, v)?,
            "tokenizer.depth" => self.tok_depth = parse_num(key, v)?,
            "tokenizer.classifier_hidden" => self.tok_classifier_hidden = parse_num(key, v)?,
            "tokenizer.classifier_dropout" => self.tok_classifier_dropout = parse_num(key, v)?,
            "tokenizer.ema_decay" => self.tok_ema_decay = parse_num(key, v)?,
            "tokenizer.ema_epsilon" => self.tok_ema_epsilon = parse_num(key, v)?,
            "tokenizer.commitment_beta" => self.tok_commitment_beta = parse_num(key, v)?,
            "model.d" => self.model_d = parse_num(key, v)?,
            "model.d_reduced" => self.model_d_reduced = parse_num(key, v)?,
            "model.encoder_layers" => self.model_encoder_layers = parse_num(key, v)?,
            "model.decoder_layers" => self.model_decoder_layers = parse_num(key, v)?,
            "model.heads" => self.model_heads = parse_num(key, v)?,
            "model.ffn_expansion" => self.model_ffn_expansion = parse_num(key, v)?,
            "model.dropout" => self.model_dropout = parse_num(key, v)?,
            "model.pose_mixer_depth" => self.model_pose_mixer_depth = parse_num(key, v)?,
            "optim.lr" => self.lr = parse_num(key, v)?,
            "optim.beta1" => self.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.beta2 = parse_num(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "optim.batch_size" => self.batch_size = parse_num(key, v)?,
            "optim.steps" => self.steps = parse_num(key, v)?,
            "optim.log_every" => self.log_every = parse_num(key, v)?,
            "optim.eval_every" => self.eval_every = parse_num(key, v)?,
            "optim.augment" => self.augment = parse_bool(key, v)?,
            "loss.vertex" => self.loss_vertex = parse_num(key, v)?,
            "loss.joint3d" => self.loss_joint3d = parse_num(key, v)?,
            "loss.joint2d" => self.loss_joint2d = parse_num(key, v)?,
            "variant" => {
                self.variant = Variant::parse(v).ok_or_else(|| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: "expected fused|image_only|pose_only|raw_coord_pose".into(),
                })?;
            }
            "gt_tokens" => self.gt_tokens = parse_bool(key, v)?,
            "noise.sigmas" => {
                let mut sigmas = Vec::new();
                for part in v.split(',') {
                    sigmas.push(parse_num::<f64>(key, part)?);
                }
                self.noise_sigmas = sigmas;
            }
            "occmap.grid" => self.occmap_grid = parse_num(key, v)?,
            "occmap.patch" => self.occmap_patch = parse_num(key, v)?,
            "occmap.samples" => self.occmap_samples = parse_num(key, v)?,
            "gen.train" => self.gen_train = parse_num(key, v)?,
            "gen.val" => self.gen_val = parse_num(key, v)?,
            "gen.test" => self.gen_test = parse_num(key, v)?,
            "data.train" => self.data_train = Some(PathBuf::from(v)),
            "data.val" => self.data_val = Some(PathBuf::from(v)),
            "data.test" => self.data_test = Some(PathBuf::from(v)),
            "ckpt.tokenizer" => self.tokenizer_ckpt = Some(PathBuf::from(v)),
            "ckpt.in" => self.ckpt_in = Some(PathBuf::from(v)),
            "ckpt.out" => self.ckpt_out = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "split" => self.split = v.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a config file: `key = value` lines, `#` comments, blank lines.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.apply_kv(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply `PMK_*` environment overrides. `PMK_OPTIM_LR=3e-4` maps to
    /// `optim.lr`; matching normalizes `.`/`_` and case against known keys.
    pub fn apply_env(&mut self, vars: &[(String, String)]) -> Result<(), ConfigError> {
        for (name, value) in vars {
            let Some(stripped) = name.strip_prefix("PMK_") else {
                continue;
            };
            let normalized = stripped.to_ascii_lowercase();
            let key = KNOWN_KEYS
                .iter()
                .find(|k| k.replace('.', "_") == normalized)
                .ok_or_else(|| ConfigError::UnknownKey(format!("{name} (env)")))?;
            self.apply_kv(key, value)?;
        }
        Ok(())
    }

    /// Canonical serialization: every effective value, sorted by key.
    pub fn canonical_text(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("world.image_h", self.image_h.to_string());
        map.insert("world.image_w", self.image_w.to_string());
        map.insert("world.ring_size_small", self.ring_size_small.to_string());
        map.insert("world.ring_size_large", self.ring_size_large.to_string());
        map.insert("world.occlusion_prob", fmt_f64(self.occlusion_prob));
        map.insert("world.occluder_side_lo", fmt_f64(self.occluder_side_lo));
        map.insert("world.occluder_side_hi", fmt_f64(self.occluder_side_hi));
        map.insert("tokenizer.joint_count", self.tok_joint_count.to_string());
        map.insert("tokenizer.token_count", self.tok_token_count.to_string());
        map.insert("tokenizer.codebook_size", self.tok_codebook_size.to_string());
        map.insert("tokenizer.token_dim", self.tok_token_dim.to_string());
        map.insert("tokenizer.expansion", self.tok_expansion.to_string());
        map.insert("tokenizer.depth", self.tok_depth.to_string());
        map.insert(
            "tokenizer.classifier_hidden",
            self.tok_classifier_hidden.to_string(),
        );
        map.insert(
            "tokenizer.classifier_dropout",
            fmt_f64(self.tok_classifier_dropout),
        );
        map.insert("tokenizer.ema_decay", fmt_f64(self.tok_ema_decay));
        map.insert("tokenizer.ema_epsilon", fmt_f64(self.tok_ema_epsilon));
        map.insert(
            "tokenizer.commitment_beta",
            fmt_f64(self.tok_commitment_beta),
        );
        map.insert("model.d", self.model_d.to_string());
        map.insert("model.d_reduced", self.model_d_reduced.to_string());
        map.insert("model.encoder_layers", self.model_encoder_layers.to_string());
        map.insert("model.decoder_layers", self.model_decoder_layers.to_string());
        map.insert("model.heads", self.model_heads.to_string());
        map.insert("model.ffn_expansion", self.model_ffn_expansion.to_string());
        map.insert("model.dropout", fmt_f64(self.model_dropout));
        map.insert(
            "model.pose_mixer_depth",
            self.model_pose_mixer_depth.to_string(),
        );
        map.insert("optim.lr", fmt_f64(self.lr));
        map.insert("optim.beta1", fmt_f64(self.beta1));
        map.insert("optim.beta2", fmt_f64(self.beta2));
        map.insert("optim.weight_decay", fmt_f64(self.weight_decay));
        map.insert("optim.batch_size", self.batch_size.to_string());
        map.insert("optim.steps", self.steps.to_string());
        map.insert("optim.log_every", self.log_every.to_string());
        map.insert("optim.eval_every", self.eval_every.to_string());
        map.insert("optim.augment", self.augment.to_string());
        map.insert("loss.vertex", fmt_f64(self.loss_vertex));
        map.insert("loss.joint3d", fmt_f64(self.loss_joint3d));
        map.insert("loss.joint2d", fmt_f64(self.loss_joint2d));
        map.insert("variant", self.variant.name().to_string());
        map.insert("gt_tokens", self.gt_tokens.to_string());
        map.insert(
            "noise.sigmas",
            self.noise_sigmas
                .iter()
                .map(|s| fmt_f64(*s))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("occmap.grid", self.occmap_grid.to_string());
        map.insert("occmap.patch", fmt_f64(self.occmap_patch));
        map.insert("occmap.samples", self.occmap_samples.to_string());
        map.insert("gen.train", self.gen_train.to_string());
        map.insert("gen.val", self.gen_val.to_string());
        map.insert("gen.test", self.gen_test.to_string());
        if let Some(p) = &self.data_train {
            map.insert("data.train", p.display().to_string());
        }
        if let Some(p) = &self.data_val {
            map.insert("data.val", p.display().to_string());
        }
        if let Some(p) = &self.data_test {
            map.insert("data.test", p.display().to_string());
        }
        if let Some(p) = &self.tokenizer_ckpt {
            map.insert("ckpt.tokenizer", p.display().to_string());
        }
        if let Some(p) = &self.ckpt_in {
            map.insert("ckpt.in", p.display().to_string());
        }
        if let Some(p) = &self.ckpt_out {
            map.insert("ckpt.out", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            map.insert("out_dir", p.display().to_string());
        }
        map.insert("split", self.split.clone());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_text())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            ring_size_small: self.ring_size_small,
            ring_size_large: self.ring_size_large,
            fine_per_coarse: 4,
            image_h: self.image_h,
            image_w: self.image_w,
            occlusion_prob: self.occlusion_prob,
            occluder_side: (self.occluder_side_lo, self.occluder_side_hi),
        }
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            joint_count: self.tok_joint_count,
            token_count: self.tok_token_count,
            codebook_size: self.tok_codebook_size,
            token_dim: self.tok_token_dim,
            expansion: self.tok_expansion,
            depth: self.tok_depth,
            dropout: 0.0,
            image_h: self.image_h,
            image_w: self.image_w,
            classifier_channels: vec![16, 32, 64],
            classifier_hidden: self.tok_classifier_hidden,
            classifier_dropout: self.tok_classifier_dropout,
            ema_decay: self.tok_ema_decay,
            ema_epsilon: self.tok_ema_epsilon,
            commitment_beta: self.tok_commitment_beta,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_model: self.model_d,
            d_reduced: self.model_d_reduced,
            encoder_layers: self.model_encoder_layers,
            decoder_layers: self.model_decoder_layers,
            heads: self.model_heads,
            ffn_expansion: self.model_ffn_expansion,
            dropout: self.model_dropout,
            pose_mixer_depth: self.model_pose_mixer_depth,
            backbone_channels: vec![8, 16, 32, 64, 128],
            image_h: self.image_h,
            image_w: self.image_w,
            pose_token_count: self.tok_token_count,
            pose_token_dim: self.tok_token_dim,
            joint_count: self.tok_joint_count,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            vertex: self.loss_vertex,
            joint3d: self.loss_joint3d,
            joint2d: self.loss_joint2d,
        }
    }

    pub fn require(
        path: &Option<PathBuf>,
        key: &'static str,
    ) -> Result<PathBuf, ConfigError> {
        path.clone().ok_or(ConfigError::MissingKey(key))
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps the hash stable.
    format!("{v}")
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "world.image_h",
    "world.image_w",
    "world.ring_size_small",
    "world.ring_size_large",
    "world.occlusion_prob",
    "world.occluder_side_lo",
    "world.occluder_side_hi",
    "tokenizer.joint_count",
    "tokenizer.token_count",
    "tokenizer.codebook_size",
    "tokenizer.token_dim",
    "tokenizer.expansion",
    "tokenizer.depth",
    "tokenizer.classifier_hidden",
    "tokenizer.classifier_dropout",
    "tokenizer.ema_decay",
    "tokenizer.ema_epsilon",
    "tokenizer.commitment_beta",
    "model.d",
    "model.d_reduced",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.heads",
    "model.ffn_expansion",
    "model.dropout",
    "model.pose_mixer_depth",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.weight_decay",
    "optim.batch_size",
    "optim.steps",
    "optim.log_every",
    "optim.eval_every",
    "optim.augment",
    "loss.vertex",
    "loss.joint3d",
    "loss.joint2d",
    "variant",
    "gt_tokens",
    "noise.sigmas",
    "occmap.grid",
    "occmap.patch",
    "occmap.samples",
    "gen.train",
    "gen.val",
    "gen.test",
    "data.train",
    "data.val",
    "data.test",
    "ckpt.tokenizer",
    "ckpt.in",
    "ckpt.out",
    "out_dir",
    "split",
];
