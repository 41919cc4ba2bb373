//! Encoder-decoder transformer with relative position biases.
//!
//! The architecture follows the T5 family: RMS pre-normalization, no
//! projection biases, ReLU feed-forward blocks, tied input/output
//! embeddings (the decoder output is scaled by d_model^-1/2 before the
//! tied projection), bucketed relative position biases shared across the
//! layers of each stack, and no position bias on cross-attention.
//! Attention scores are scaled by head_dim^-1/2.

mod forward;
mod infer;

pub use forward::{forward, nll, BoundModel};
pub use infer::{encode_states, DecodeSession, DecoderCache, EncoderStates};

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("source sequence is empty")]
    EmptySource,
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Architecture hyperparameters; every parameter tensor shape is a
/// function of this struct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_context: usize,
    pub rel_pos_buckets: usize,
}

/// Relative distances beyond this share log-spaced buckets.
pub const REL_POS_MAX_DISTANCE: usize = 128;

impl ModelConfig {
    /// Desk-scale preset used for training runs.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 4096,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_context: 512,
            rel_pos_buckets: 32,
        }
    }

    /// Approximate published-scale shapes, kept solely for parameter
    /// count accounting; the exact production shapes are not public and
    /// these presets are not trained here.
    pub fn base_scale() -> Self {
        ModelConfig {
            vocab_size: 32128,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            n_enc_layers: 12,
            n_dec_layers: 12,
            max_context: 512,
            rel_pos_buckets: 32,
        }
    }

    pub fn large_scale() -> Self {
        ModelConfig {
            vocab_size: 32128,
            d_model: 1024,
            n_heads: 16,
            d_ff: 4096,
            n_enc_layers: 24,
            n_dec_layers: 24,
            max_context: 512,
            rel_pos_buckets: 32,
        }
    }

    pub fn xl_scale() -> Self {
        ModelConfig {
            vocab_size: 32128,
            d_model: 2048,
            n_heads: 32,
            d_ff: 9216,
            n_enc_layers: 24,
            n_dec_layers: 24,
            max_context: 512,
            rel_pos_buckets: 32,
        }
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context > 512 {
            return Err(ModelError::InvalidConfig(format!(
                "max_context {} exceeds the 512-token ceiling",
                self.max_context
            )));
        }
        if self.rel_pos_buckets < 4 || self.rel_pos_buckets % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "rel_pos_buckets {} must be even and at least 4",
                self.rel_pos_buckets
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count implied by the declared tensor shapes.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let enc_layer = 4 * d * d + 2 * d * self.d_ff + 2 * d;
        let dec_layer = 8 * d * d + 2 * d * self.d_ff + 3 * d;
        self.vocab_size * d
            + self.n_enc_layers * enc_layer
            + self.n_dec_layers * dec_layer
            + 2 * self.rel_pos_buckets * self.n_heads
            + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncLayer {
    pub norm_attn: Tensor,
    pub attn: AttnParams,
    pub norm_ff: Tensor,
    pub ff_in: Tensor,
    pub ff_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLayer {
    pub norm_self: Tensor,
    pub self_attn: AttnParams,
    pub norm_cross: Tensor,
    pub cross_attn: AttnParams,
    pub norm_ff: Tensor,
    pub ff_in: Tensor,
    pub ff_out: Tensor,
}

/// All learnable tensors of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Shared token embedding, also the tied output projection.
    pub embedding: Tensor,
    pub enc_layers: Vec<EncLayer>,
    pub dec_layers: Vec<DecLayer>,
    /// [buckets, heads], shared across encoder layers.
    pub enc_rel_bias: Tensor,
    /// [buckets, heads], causal bucketing, shared across decoder layers.
    pub dec_rel_bias: Tensor,
    pub enc_final_norm: Tensor,
    pub dec_final_norm: Tensor,
}

/// Deterministic initialization: projections draw from a normal with
/// std = d_model^-1/2, embeddings from std 1.0, norm gains start at one
/// and relative bias tables at zero.
pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let mut stream = rng::stream(&[seed, 0x6d6f_64656c]); // "model"

    let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| (gaussian(&mut stream) * std) as f32)
            .collect();
        Tensor::new(shape, data).expect("init shape").with_grad()
    };

    let embedding = normal(vec![config.vocab_size, d], 1.0);
    let attn = |normal: &mut dyn FnMut(Vec<usize>, f64) -> Tensor| AttnParams {
        wq: normal(vec![d, d], proj_std),
        wk: normal(vec![d, d], proj_std),
        wv: normal(vec![d, d], proj_std),
        wo: normal(vec![d, d], proj_std),
    };
    let ones = |n: usize| {
        Tensor::new(vec![n], vec![1.0; n])
            .expect("gain shape")
            .with_grad()
    };

    let enc_layers = (0..config.n_enc_layers)
        .map(|_| EncLayer {
            norm_attn: ones(d),
            attn: attn(&mut normal),
            norm_ff: ones(d),
            ff_in: normal(vec![d, config.d_ff], proj_std),
            ff_out: normal(vec![config.d_ff, d], proj_std),
        })
        .collect();
    let dec_layers = (0..config.n_dec_layers)
        .map(|_| DecLayer {
            norm_self: ones(d),
            self_attn: attn(&mut normal),
            norm_cross: ones(d),
            cross_attn: attn(&mut normal),
            norm_ff: ones(d),
            ff_in: normal(vec![d, config.d_ff], proj_std),
            ff_out: normal(vec![config.d_ff, d], proj_std),
        })
        .collect();
    let zeros = |shape: Vec<usize>| Tensor::zeros(shape).with_grad();

    Ok(ModelParams {
        config: config.clone(),
        embedding,
        enc_layers,
        dec_layers,
        enc_rel_bias: zeros(vec![config.rel_pos_buckets, config.n_heads]),
        dec_rel_bias: zeros(vec![config.rel_pos_buckets, config.n_heads]),
        enc_final_norm: ones(d),
        dec_final_norm: ones(d),
    })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keep the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl ModelParams {
    /// Canonical (name, tensor) walk; checkpointing and the optimizer rely
    /// on this order being stable.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding)];
        for (i, l) in self.enc_layers.iter().enumerate() {
            out.push((format!("enc.{i}.norm_attn"), &l.norm_attn));
            out.push((format!("enc.{i}.attn.wq"), &l.attn.wq));
            out.push((format!("enc.{i}.attn.wk"), &l.attn.wk));
            out.push((format!("enc.{i}.attn.wv"), &l.attn.wv));
            out.push((format!("enc.{i}.attn.wo"), &l.attn.wo));
            out.push((format!("enc.{i}.norm_ff"), &l.norm_ff));
            out.push((format!("enc.{i}.ff_in"), &l.ff_in));
            out.push((format!("enc.{i}.ff_out"), &l.ff_out));
        }
        for (i, l) in self.dec_layers.iter().enumerate() {
            out.push((format!("dec.{i}.norm_self"), &l.norm_self));
            out.push((format!("dec.{i}.self.wq"), &l.self_attn.wq));
            out.push((format!("dec.{i}.self.wk"), &l.self_attn.wk));
            out.push((format!("dec.{i}.self.wv"), &l.self_attn.wv));
            out.push((format!("dec.{i}.self.wo"), &l.self_attn.wo));
            out.push((format!("dec.{i}.norm_cross"), &l.norm_cross));
            out.push((format!("dec.{i}.cross.wq"), &l.cross_attn.wq));
            out.push((format!("dec.{i}.cross.wk"), &l.cross_attn.wk));
            out.push((format!("dec.{i}.cross.wv"), &l.cross_attn.wv));
            out.push((format!("dec.{i}.cross.wo"), &l.cross_attn.wo));
            out.push((format!("dec.{i}.norm_ff"), &l.norm_ff));
            out.push((format!("dec.{i}.ff_in"), &l.ff_in));
            out.push((format!("dec.{i}.ff_out"), &l.ff_out));
        }
        out.push(("enc_rel_bias".into(), &self.enc_rel_bias));
        out.push(("dec_rel_bias".into(), &self.dec_rel_bias));
        out.push(("enc_final_norm".into(), &self.enc_final_norm));
        out.push(("dec_final_norm".into(), &self.dec_final_norm));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embedding".into(), &mut self.embedding)];
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            out.push((format!("enc.{i}.norm_attn"), &mut l.norm_attn));
            out.push((format!("enc.{i}.attn.wq"), &mut l.attn.wq));
            out.push((format!("enc.{i}.attn.wk"), &mut l.attn.wk));
            out.push((format!("enc.{i}.attn.wv"), &mut l.attn.wv));
            out.push((format!("enc.{i}.attn.wo"), &mut l.attn.wo));
            out.push((format!("enc.{i}.norm_ff"), &mut l.norm_ff));
            out.push((format!("enc.{i}.ff_in"), &mut l.ff_in));
            out.push((format!("enc.{i}.ff_out"), &mut l.ff_out));
        }
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            out.push((format!("dec.{i}.norm_self"), &mut l.norm_self));
            out.push((format!("dec.{i}.self.wq"), &mut l.self_attn.wq));
            out.push((format!("dec.{i}.self.wk"), &mut l.self_attn.wk));
            out.push((format!("dec.{i}.self.wv"), &mut l.self_attn.wv));
            out.push((format!("dec.{i}.self.wo"), &mut l.self_attn.wo));
            out.push((format!("dec.{i}.norm_cross"), &mut l.norm_cross));
            out.push((format!("dec.{i}.cross.wq"), &mut l.cross_attn.wq));
            out.push((format!("dec.{i}.cross.wk"), &mut l.cross_attn.wk));
            out.push((format!("dec.{i}.cross.wv"), &mut l.cross_attn.wv));
            out.push((format!("dec.{i}.cross.wo"), &mut l.cross_attn.wo));
            out.push((format!("dec.{i}.norm_ff"), &mut l.norm_ff));
            out.push((format!("dec.{i}.ff_in"), &mut l.ff_in));
            out.push((format!("dec.{i}.ff_out"), &mut l.ff_out));
        }
        out.push(("enc_rel_bias".into(), &mut self.enc_rel_bias));
        out.push(("dec_rel_bias".into(), &mut self.dec_rel_bias));
        out.push(("enc_final_norm".into(), &mut self.enc_final_norm));
        out.push(("dec_final_norm".into(), &mut self.dec_final_norm));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// T5-style relative position bucket for distance key_pos - query_pos.
/// Small distances get exact buckets, larger ones share log-spaced
/// buckets up to [`REL_POS_MAX_DISTANCE`]; bidirectional bucketing uses
/// half the range for each sign.
pub fn rel_pos_bucket(relative: i64, bidirectional: bool, num_buckets: usize) -> u16 {
    let mut bucket = 0i64;
    let mut nb = num_buckets as i64;
    let mut rel = relative;
    if bidirectional {
        nb /= 2;
        if rel > 0 {
            bucket += nb;
        }
        rel = rel.abs();
    } else {
        rel = -(rel.min(0));
    }
    let max_exact = nb / 2;
    let val = if rel < max_exact {
        rel
    } else {
        let large = max_exact as f64
            + ((rel as f64 / max_exact as f64).ln()
                / (REL_POS_MAX_DISTANCE as f64 / max_exact as f64).ln())
                * (nb - max_exact) as f64;
        (large as i64).min(nb - 1)
    };
    (bucket + val) as u16
}

/// Bucket matrix for queries 0..rows attending keys 0..cols.
pub fn bucket_matrix(
    rows: usize,
    cols: usize,
    bidirectional: bool,
    num_buckets: usize,
) -> Arc<Vec<u16>> {
    let mut out = Vec::with_capacity(rows * cols);
    for q in 0..rows as i64 {
        for k in 0..cols as i64 {
            out.push(rel_pos_bucket(k - q, bidirectional, num_buckets));
        }
    }
    Arc::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig {
            vocab_size: 50,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_context: 32,
            rel_pos_buckets: 8,
        };
        let a = init(&cfg, 7).unwrap();
        let b = init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init(&cfg, 8).unwrap();
        assert_ne!(a.embedding.data(), c.embedding.data());
    }

    #[test]
    fn head_dim_follows_divisibility_rule() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ..ModelConfig::toy()
        };
        assert_eq!(cfg.head_dim(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.n_heads = 3; // 64 % 3 != 0
        assert!(matches!(init(&cfg, 1), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ModelConfig::toy();
        cfg.max_context = 1024;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_param_count_matches_shape_sum() {
        // Independent tally of the declared shapes for the toy preset:
        // embedding 4096*64, per encoder layer 4*64^2 + 2*64*256 + 2*64,
        // per decoder layer 8*64^2 + 2*64*256 + 3*64, two 32*4 bias
        // tables, two final gains.
        let expected = 4096 * 64
            + 2 * (4 * 64 * 64 + 2 * 64 * 256 + 2 * 64)
            + 2 * (8 * 64 * 64 + 2 * 64 * 256 + 3 * 64)
            + 2 * (32 * 4)
            + 2 * 64;
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.param_count(), expected);
        let params = init(&cfg, 3).unwrap();
        assert_eq!(params.param_count(), expected);
    }

    #[test]
    fn scale_presets_land_near_their_size_class() {
        let base = ModelConfig::base_scale().param_count() as f64;
        assert!((2.0e8..2.5e8).contains(&base), "base preset {base}");
        let large = ModelConfig::large_scale().param_count() as f64;
        assert!((6.8e8..8.4e8).contains(&large), "large preset {large}");
        let xl = ModelConfig::xl_scale().param_count() as f64;
        assert!((2.7e9..3.4e9).contains(&xl), "xl preset {xl}");
    }

    #[test]
    fn bucket_assignment_is_translation_invariant() {
        for num_buckets in [8usize, 32] {
            for bidir in [true, false] {
                for q in 0i64..40 {
                    for k in 0i64..40 {
                        let a = rel_pos_bucket(k - q, bidir, num_buckets);
                        let b = rel_pos_bucket((k + 17) - (q + 17), bidir, num_buckets);
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn bidirectional_buckets_separate_signs() {
        let left = rel_pos_bucket(-3, true, 32);
        let right = rel_pos_bucket(3, true, 32);
        assert_ne!(left, right);
        assert!(rel_pos_bucket(0, true, 32) < 16);
    }

    #[test]
    fn named_walks_agree_between_ref_and_mut() {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 2,
            n_dec_layers: 1,
            max_context: 16,
            rel_pos_buckets: 8,
        };
        let mut params = init(&cfg, 1).unwrap();
        let names: Vec<String> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let names_mut: Vec<String> = params
            .named_tensors_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, names_mut);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
