//! Tape-free inference: batch encoder states and an incremental decoder
//! with per-hypothesis key/value caches.
//!
//! This path recomputes the same arithmetic as the tape forward (f32
//! storage, f64 accumulation); an equivalence test pins the two together.

use super::{bucket_matrix, rel_pos_bucket, ModelError, ModelParams};
use crate::tensor::matmul_raw;
use crate::tokenizer::PAD_ID;

const MASK_NEG: f64 = -1e9;

/// Final-normed encoder token states, row-major [len, d].
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub states: Vec<f32>,
    pub len: usize,
    pub d: usize,
}

impl EncoderStates {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.states[i * self.d..(i + 1) * self.d]
    }
}

fn rms_rows(x: &[f32], gain: &[f32], rows: usize, d: usize) -> Vec<f32> {
    const EPS: f64 = 1e-6;
    let mut out = vec![0.0f32; rows * d];
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mut ss = 0.0f64;
        for &v in row {
            ss += (v as f64) * (v as f64);
        }
        let inv = 1.0 / (ss / d as f64 + EPS).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] as f64 * inv * gain[j] as f64) as f32;
        }
    }
    out
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn relu_in_place(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
}

fn softmax_f64(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Runs the encoder stack without a tape; the contextual token states
/// also back the embedding-based metric.
pub fn encode_states(params: &ModelParams, src_ids: &[u32]) -> Result<EncoderStates, ModelError> {
    let cfg = &params.config;
    if src_ids.is_empty() {
        return Err(ModelError::EmptySource);
    }
    if src_ids.len() > cfg.max_context {
        return Err(ModelError::ContextOverflow {
            len: src_ids.len(),
            max: cfg.max_context,
        });
    }
    let d = cfg.d_model;
    let s_len = src_ids.len();
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let buckets = bucket_matrix(s_len, s_len, true, cfg.rel_pos_buckets);
    let bias = params.enc_rel_bias.data();
    let n_heads = cfg.n_heads;
    let pad: Vec<bool> = src_ids.iter().map(|&t| t == PAD_ID).collect();

    let emb = params.embedding.data();
    let mut x = vec![0.0f32; s_len * d];
    for (i, &t) in src_ids.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }

    for layer in &params.enc_layers {
        let normed = rms_rows(&x, layer.norm_attn.data(), s_len, d);
        let q = matmul_raw(&normed, layer.attn.wq.data(), s_len, d, d);
        let k = matmul_raw(&normed, layer.attn.wk.data(), s_len, d, d);
        let v = matmul_raw(&normed, layer.attn.wv.data(), s_len, d, d);
        let mut ctx = vec![0.0f32; s_len * d];
        for h in 0..n_heads {
            let off = h * dk;
            for i in 0..s_len {
                let mut scores = vec![0.0f64; s_len];
                for j in 0..s_len {
                    let mut dot = 0.0f64;
                    for p in 0..dk {
                        dot += q[i * d + off + p] as f64 * k[j * d + off + p] as f64;
                    }
                    let bucket = buckets[i * s_len + j] as usize;
                    let mut s = dot * scale + bias[bucket * n_heads + h] as f64;
                    if pad[j] {
                        s += MASK_NEG;
                    }
                    scores[j] = s;
                }
                softmax_f64(&mut scores);
                for p in 0..dk {
                    let mut acc = 0.0f64;
                    for j in 0..s_len {
                        acc += scores[j] * v[j * d + off + p] as f64;
                    }
                    ctx[i * d + off + p] = acc as f32;
                }
            }
        }
        let attn_out = matmul_raw(&ctx, layer.attn.wo.data(), s_len, d, d);
        add_assign(&mut x, &attn_out);

        let normed = rms_rows(&x, layer.norm_ff.data(), s_len, d);
        let mut hidden = matmul_raw(&normed, layer.ff_in.data(), s_len, d, cfg.d_ff);
        relu_in_place(&mut hidden);
        let ff = matmul_raw(&hidden, layer.ff_out.data(), s_len, cfg.d_ff, d);
        add_assign(&mut x, &ff);
    }
    let states = rms_rows(&x, params.enc_final_norm.data(), s_len, d);
    Ok(EncoderStates {
        states,
        len: s_len,
        d,
    })
}

/// Growing self-attention key/value rows, one block per decoder layer.
/// Cloning a cache forks a hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// One source sequence prepared for incremental decoding: encoder states
/// plus per-layer cross-attention keys/values.
pub struct DecodeSession<'a> {
    params: &'a ModelParams,
    cross_k: Vec<Vec<f32>>,
    cross_v: Vec<Vec<f32>>,
    src_pad: Vec<bool>,
    s_len: usize,
}

impl<'a> DecodeSession<'a> {
    pub fn new(params: &'a ModelParams, src_ids: &[u32]) -> Result<Self, ModelError> {
        let enc = encode_states(params, src_ids)?;
        let d = params.config.d_model;
        let mut cross_k = Vec::with_capacity(params.dec_layers.len());
        let mut cross_v = Vec::with_capacity(params.dec_layers.len());
        for layer in &params.dec_layers {
            cross_k.push(matmul_raw(
                &enc.states,
                layer.cross_attn.wk.data(),
                enc.len,
                d,
                d,
            ));
            cross_v.push(matmul_raw(
                &enc.states,
                layer.cross_attn.wv.data(),
                enc.len,
                d,
                d,
            ));
        }
        Ok(DecodeSession {
            params,
            cross_k,
            cross_v,
            src_pad: src_ids.iter().map(|&t| t == PAD_ID).collect(),
            s_len: enc.len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    pub fn empty_cache(&self) -> DecoderCache {
        let layers = self.params.dec_layers.len();
        DecoderCache {
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Feeds one token at the next decoder position and returns the
    /// next-token logits [vocab].
    pub fn step(&self, cache: &mut DecoderCache, token: u32) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let n_heads = cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let pos = cache.len;
        if pos + 1 > cfg.max_context {
            return Err(ModelError::ContextOverflow {
                len: pos + 1,
                max: cfg.max_context,
            });
        }

        let emb = self.params.embedding.data();
        let mut x = emb[token as usize * d..(token as usize + 1) * d].to_vec();

        for (l, layer) in self.params.dec_layers.iter().enumerate() {
            // Self attention over cached positions plus this one.
            let normed = rms_rows(&x, layer.norm_self.data(), 1, d);
            let q = matmul_raw(&normed, layer.self_attn.wq.data(), 1, d, d);
            let k_new = matmul_raw(&normed, layer.self_attn.wk.data(), 1, d, d);
            let v_new = matmul_raw(&normed, layer.self_attn.wv.data(), 1, d, d);
            cache.self_k[l].extend_from_slice(&k_new);
            cache.self_v[l].extend_from_slice(&v_new);
            let keys = &cache.self_k[l];
            let vals = &cache.self_v[l];
            let t_len = pos + 1;
            let bias = self.params.dec_rel_bias.data();
            let mut ctx = vec![0.0f32; d];
            for h in 0..n_heads {
                let off = h * dk;
                let mut scores = vec![0.0f64; t_len];
                for (j, score) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0f64;
                    for p in 0..dk {
                        dot += q[off + p] as f64 * keys[j * d + off + p] as f64;
                    }
                    let bucket =
                        rel_pos_bucket(j as i64 - pos as i64, false, cfg.rel_pos_buckets) as usize;
                    *score = dot * scale + bias[bucket * n_heads + h] as f64;
                }
                softmax_f64(&mut scores);
                for p in 0..dk {
                    let mut acc = 0.0f64;
                    for (j, w) in scores.iter().enumerate() {
                        acc += w * vals[j * d + off + p] as f64;
                    }
                    ctx[off + p] = acc as f32;
                }
            }
            let attn_out = matmul_raw(&ctx, layer.self_attn.wo.data(), 1, d, d);
            add_assign(&mut x, &attn_out);

            // Cross attention over the fixed encoder states.
            let normed = rms_rows(&x, layer.norm_cross.data(), 1, d);
            let q = matmul_raw(&normed, layer.cross_attn.wq.data(), 1, d, d);
            let keys = &self.cross_k[l];
            let vals = &self.cross_v[l];
            let mut ctx = vec![0.0f32; d];
            for h in 0..n_heads {
                let off = h * dk;
                let mut scores = vec![0.0f64; self.s_len];
                for (j, score) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0f64;
                    for p in 0..dk {
                        dot += q[off + p] as f64 * keys[j * d + off + p] as f64;
                    }
                    *score = dot * scale + if self.src_pad[j] { MASK_NEG } else { 0.0 };
                }
                softmax_f64(&mut scores);
                for p in 0..dk {
                    let mut acc = 0.0f64;
                    for (j, w) in scores.iter().enumerate() {
                        acc += w * vals[j * d + off + p] as f64;
                    }
                    ctx[off + p] = acc as f32;
                }
            }
            let attn_out = matmul_raw(&ctx, layer.cross_attn.wo.data(), 1, d, d);
            add_assign(&mut x, &attn_out);

            let normed = rms_rows(&x, layer.norm_ff.data(), 1, d);
            let mut hidden = matmul_raw(&normed, layer.ff_in.data(), 1, d, cfg.d_ff);
            relu_in_place(&mut hidden);
            let ff = matmul_raw(&hidden, layer.ff_out.data(), 1, cfg.d_ff, d);
            add_assign(&mut x, &ff);
        }

        let out = rms_rows(&x, self.params.dec_final_norm.data(), 1, d);
        let tie_scale = 1.0 / (d as f64).sqrt();
        let mut logits = vec![0.0f32; cfg.vocab_size];
        for (v, logit) in logits.iter_mut().enumerate() {
            let row = &emb[v * d..(v + 1) * d];
            let mut dot = 0.0f64;
            for p in 0..d {
                dot += out[p] as f64 * row[p] as f64;
            }
            *logit = (dot * tie_scale) as f32;
        }
        cache.len += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init, ModelConfig};
    use crate::tensor::Tape;

    #[test]
    fn incremental_decode_matches_teacher_forced_logits() {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_context: 24,
            rel_pos_buckets: 8,
        };
        let params = init(&cfg, 9).unwrap();
        let src = [4u32, 5, 6, 7, 8];
        let tgt_in = [PAD_ID, 10, 11, 12, 13];
        let mut tape = Tape::new();
        let (node, _) = forward(&mut tape, &params, &src, &tgt_in).unwrap();
        let reference = tape.value(node).data().to_vec();

        let session = DecodeSession::new(&params, &src).unwrap();
        let mut cache = session.empty_cache();
        for (t, &tok) in tgt_in.iter().enumerate() {
            let logits = session.step(&mut cache, tok).unwrap();
            for (v, &l) in logits.iter().enumerate() {
                let r = reference[t * cfg.vocab_size + v];
                assert!(
                    (l - r).abs() < 1e-4,
                    "position {t} vocab {v}: incremental {l} vs tape {r}"
                );
            }
        }
    }

    #[test]
    fn cache_forking_is_independent() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_context: 16,
            rel_pos_buckets: 8,
        };
        let params = init(&cfg, 2).unwrap();
        let session = DecodeSession::new(&params, &[3, 4, 5]).unwrap();
        let mut base = session.empty_cache();
        session.step(&mut base, PAD_ID).unwrap();
        let mut fork_a = base.clone();
        let mut fork_b = base.clone();
        let la = session.step(&mut fork_a, 6).unwrap();
        let lb = session.step(&mut fork_b, 7).unwrap();
        assert_ne!(la, lb);
        // Replaying fork_a's token again gives identical logits.
        let mut fork_c = base.clone();
        let lc = session.step(&mut fork_c, 6).unwrap();
        assert_eq!(la, lc);
    }

    #[test]
    fn encoder_states_reject_empty_source() {
        let params = init(
            &ModelConfig {
                vocab_size: 20,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_enc_layers: 1,
                n_dec_layers: 1,
                max_context: 16,
                rel_pos_buckets: 8,
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            encode_states(&params, &[]),
            Err(ModelError::EmptySource)
        ));
    }
}
