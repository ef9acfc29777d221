//! Checkpoints reuse the dataset container: parameter tensors as named f64
//! arrays, plus a text header carrying the producing config, its hash, and
//! (for model checkpoints) the frozen tokenizer's file hash.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::container::{Container, NamedArray};
use crate::geometry::ToyBodyModel;
use crate::model::{MeshTransformer, ModelConfig, Variant};
use crate::nn::ParamSet;
use crate::tokenizer::{Codebook, PoseTokenizer, TokenizerConfig};

pub const TOKENIZER_KIND: &str = "tokenizer-checkpoint";
pub const MODEL_KIND: &str = "model-checkpoint";

#[derive(Debug, Clone)]
pub struct TokenizerMeta {
    pub config_hash: String,
    /// SHA-256 of the checkpoint file bytes, referenced by model checkpoints.
    pub file_hash: String,
}

#[derive(Debug, Clone)]
pub struct ModelMeta {
    pub config_hash: String,
    pub tokenizer_ref_hash: String,
    pub variant: Variant,
}

fn push_params(c: &mut Container, prefix: &str, ps: &ParamSet) {
    for (name, value) in ps.iter() {
        c.push(NamedArray::f64_2d(&format!("{prefix}/{name}"), value));
    }
}

fn read_params(c: &Container, prefix: &str, ps: &mut ParamSet) -> Result<(), TrainError> {
    for i in 0..ps.len() {
        let name = format!("{prefix}/{}", ps.name(i));
        let arr = c.get(&name)?.to_f64_2d()?;
        if arr.dim() != ps.value_at(i).dim() {
            return Err(TrainError::Mismatch(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                arr.dim(),
                ps.value_at(i).dim()
            )));
        }
        ps.set_at(i, arr);
    }
    Ok(())
}

fn tokenizer_header(cfg: &TokenizerConfig, run_hash: &str) -> String {
    format!(
        "kind = {TOKENIZER_KIND}\nschema = 1\nconfig_hash = {run_hash}\n\
         joint_count = {}\ntoken_count = {}\ncodebook_size = {}\ntoken_dim = {}\n\
         expansion = {}\ndepth = {}\nimage_h = {}\nimage_w = {}\n\
         classifier_channels = {}\nclassifier_hidden = {}\nclassifier_dropout = {}\n\
         ema_decay = {}\nema_epsilon = {}\ncommitment_beta = {}\n",
        cfg.joint_count,
        cfg.token_count,
        cfg.codebook_size,
        cfg.token_dim,
        cfg.expansion,
        cfg.depth,
        cfg.image_h,
        cfg.image_w,
        cfg.classifier_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(","),
        cfg.classifier_hidden,
        cfg.classifier_dropout,
        cfg.ema_decay,
        cfg.ema_epsilon,
        cfg.commitment_beta,
    )
}

pub fn save_tokenizer(
    path: &Path,
    tok: &PoseTokenizer,
    run_hash: &str,
) -> Result<TokenizerMeta, TrainError> {
    let mut c = Container::new(tokenizer_header(&tok.cfg, run_hash));
    push_params(&mut c, "encoder", &tok.encoder_params);
    push_params(&mut c, "decoder", &tok.decoder_params);
    push_params(&mut c, "classifier", &tok.classifier_params);
    c.push(NamedArray::f64_2d("codebook/entries", &tok.codebook.entries));
    c.push(NamedArray::f64_2d("codebook/ema_sums", &tok.codebook.ema_sums));
    c.push(NamedArray::f64_2d(
        "codebook/ema_sizes",
        &Array2::from_shape_vec(
            (1, tok.codebook.ema_cluster_sizes.len()),
            tok.codebook.ema_cluster_sizes.clone(),
        )
        .unwrap(),
    ));
    let bytes = c.to_bytes();
    std::fs::write(path, &bytes).map_err(super::io_err(path))?;
    Ok(TokenizerMeta {
        config_hash: run_hash.to_string(),
        file_hash: hex_digest(&bytes),
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn header_num<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T, TrainError> {
    c.header_field(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainError::Mismatch(format!("checkpoint header missing {key}")))
}

pub fn load_tokenizer(path: &Path) -> Result<(PoseTokenizer, TokenizerMeta), TrainError> {
    if !path.exists() {
        return Err(TrainError::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(super::io_err(path))?;
    let c = Container::from_bytes(&bytes)?;
    if c.header_field("kind") != Some(TOKENIZER_KIND) {
        return Err(TrainError::Mismatch(format!(
            "{} is not a tokenizer checkpoint",
            path.display()
        )));
    }
    let cfg = TokenizerConfig {
        joint_count: header_num(&c, "joint_count")?,
        token_count: header_num(&c, "token_count")?,
        codebook_size: header_num(&c, "codebook_size")?,
        token_dim: header_num(&c, "token_dim")?,
        expansion: header_num(&c, "expansion")?,
        depth: header_num(&c, "depth")?,
        dropout: 0.0,
        image_h: header_num(&c, "image_h")?,
        image_w: header_num(&c, "image_w")?,
        classifier_channels: c
            .header_field("classifier_channels")
            .unwrap_or_default()
            .split(',')
            .filter_map(|s| s.parse().ok())
            .collect(),
        classifier_hidden: header_num(&c, "classifier_hidden")?,
        classifier_dropout: header_num(&c, "classifier_dropout")?,
        ema_decay: header_num(&c, "ema_decay")?,
        ema_epsilon: header_num(&c, "ema_epsilon")?,
        commitment_beta: header_num(&c, "commitment_beta")?,
    };
    // Rebuild the module structure, then overwrite every parameter.
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut tok = PoseTokenizer::init(cfg, &mut rng);
    read_params(&c, "encoder", &mut tok.encoder_params)?;
    read_params(&c, "decoder", &mut tok.decoder_params)?;
    read_params(&c, "classifier", &mut tok.classifier_params)?;
    let entries = c.get("codebook/entries")?.to_f64_2d()?;
    let sums = c.get("codebook/ema_sums")?.to_f64_2d()?;
    let sizes = c.get("codebook/ema_sizes")?.to_f64_2d()?;
    tok.codebook = Codebook {
        entries,
        ema_sums: sums,
        ema_cluster_sizes: sizes.iter().cloned().collect(),
        decay: tok.cfg.ema_decay,
        epsilon: tok.cfg.ema_epsilon,
    };
    let meta = TokenizerMeta {
        config_hash: c.header_field("config_hash").unwrap_or("").to_string(),
        file_hash: hex_digest(&bytes),
    };
    Ok((tok, meta))
}

fn model_header(cfg: &ModelConfig, run_hash: &str, tokenizer_ref: &str) -> String {
    format!(
        "kind = {MODEL_KIND}\nschema = 1\nconfig_hash = {run_hash}\n\
         tokenizer_ref = {tokenizer_ref}\nvariant = {}\nd_model = {}\nd_reduced = {}\n\
         encoder_layers = {}\ndecoder_layers = {}\nheads = {}\nffn_expansion = {}\n\
         dropout = {}\npose_mixer_depth = {}\nbackbone_channels = {}\nimage_h = {}\n\
         image_w = {}\npose_token_count = {}\npose_token_dim = {}\njoint_count = {}\n",
        cfg.variant.name(),
        cfg.d_model,
        cfg.d_reduced,
        cfg.encoder_layers,
        cfg.decoder_layers,
        cfg.heads,
        cfg.ffn_expansion,
        cfg.dropout,
        cfg.pose_mixer_depth,
        cfg.backbone_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(","),
        cfg.image_h,
        cfg.image_w,
        cfg.pose_token_count,
        cfg.pose_token_dim,
        cfg.joint_count,
    )
}

pub fn save_model(
    path: &Path,
    model: &MeshTransformer,
    run_hash: &str,
    tokenizer_ref: &str,
) -> Result<ModelMeta, TrainError> {
    let mut c = Container::new(model_header(&model.cfg, run_hash, tokenizer_ref));
    push_params(&mut c, "model", &model.params);
    let bytes = c.to_bytes();
    std::fs::write(path, &bytes).map_err(super::io_err(path))?;
    Ok(ModelMeta {
        config_hash: run_hash.to_string(),
        tokenizer_ref_hash: tokenizer_ref.to_string(),
        variant: model.cfg.variant,
    })
}

pub fn load_model(
    path: &Path,
    body: &ToyBodyModel,
) -> Result<(MeshTransformer, ModelMeta), TrainError> {
    if !path.exists() {
        return Err(TrainError::MissingCheckpoint(path.to_path_buf()));
    }
    let c = Container::read_from(path)?;
    if c.header_field("kind") != Some(MODEL_KIND) {
        return Err(TrainError::Mismatch(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let variant = c
        .header_field("variant")
        .and_then(Variant::parse)
        .ok_or_else(|| TrainError::Mismatch("unknown variant in checkpoint".into()))?;
    let cfg = ModelConfig {
        variant,
        d_model: header_num(&c, "d_model")?,
        d_reduced: header_num(&c, "d_reduced")?,
        encoder_layers: header_num(&c, "encoder_layers")?,
        decoder_layers: header_num(&c, "decoder_layers")?,
        heads: header_num(&c, "heads")?,
        ffn_expansion: header_num(&c, "ffn_expansion")?,
        dropout: header_num(&c, "dropout")?,
        pose_mixer_depth: header_num(&c, "pose_mixer_depth")?,
        backbone_channels: c
            .header_field("backbone_channels")
            .unwrap_or_default()
            .split(',')
            .filter_map(|s| s.parse().ok())
            .collect(),
        image_h: header_num(&c, "image_h")?,
        image_w: header_num(&c, "image_w")?,
        pose_token_count: header_num(&c, "pose_token_count")?,
        pose_token_dim: header_num(&c, "pose_token_dim")?,
        joint_count: header_num(&c, "joint_count")?,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model = MeshTransformer::init(cfg, body, &mut rng)?;
    read_params(&c, "model", &mut model.params)?;
    let meta = ModelMeta {
        config_hash: c.header_field("config_hash").unwrap_or("").to_string(),
        tokenizer_ref_hash: c.header_field("tokenizer_ref").unwrap_or("").to_string(),
        variant,
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_toy_model, WorldConfig};

    #[test]
    fn tokenizer_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.ckpt");
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let tok = PoseTokenizer::init(TokenizerConfig::default(), &mut rng);
        save_tokenizer(&path, &tok, "deadbeef").unwrap();
        let (back, meta) = load_tokenizer(&path).unwrap();
        assert!(back.encoder_params.bits_equal(&tok.encoder_params));
        assert!(back.decoder_params.bits_equal(&tok.decoder_params));
        assert!(back.classifier_params.bits_equal(&tok.classifier_params));
        assert_eq!(back.codebook.entries, tok.codebook.entries);
        assert_eq!(meta.config_hash, "deadbeef");
        // Saving the loaded tokenizer reproduces the same file hash.
        let path2 = dir.path().join("tok2.ckpt");
        let meta2 = save_tokenizer(&path2, &back, "deadbeef").unwrap();
        assert_eq!(meta.file_hash, meta2.file_hash);
    }

    #[test]
    fn model_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let world = WorldConfig::default();
        let body = build_toy_model(&world).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let model = MeshTransformer::init(ModelConfig::default(), &body, &mut rng).unwrap();
        save_model(&path, &model, "cfg123", "tokhash456").unwrap();
        let (back, meta) = load_model(&path, &body).unwrap();
        assert!(back.params.bits_equal(&model.params));
        assert_eq!(meta.tokenizer_ref_hash, "tokhash456");
        assert_eq!(meta.variant, Variant::Fused);
    }

    #[test]
    fn missing_checkpoint_is_explicit() {
        let world = WorldConfig::default();
        let body = build_toy_model(&world).unwrap();
        match load_model(Path::new("/nonexistent/m.ckpt"), &body) {
            Err(TrainError::MissingCheckpoint(_)) => {}
            Err(other) => panic!("expected MissingCheckpoint, got {other:?}"),
            Ok(_) => panic!("expected MissingCheckpoint, got a model"),
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.ckpt");
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let tok = PoseTokenizer::init(TokenizerConfig::default(), &mut rng);
        save_tokenizer(&path, &tok, "x").unwrap();
        let world = WorldConfig::default();
        let body = build_toy_model(&world).unwrap();
        assert!(matches!(
            load_model(&path, &body),
            Err(TrainError::Mismatch(_))
        ));
    }
}
