//! Teacher-forced forward pass on the autodiff tape.

use std::sync::Arc;

use super::{bucket_matrix, ModelConfig, ModelError, ModelParams};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::tokenizer::{EOS_ID, PAD_ID};

const MASK_NEG: f32 = -1e9;

#[derive(Clone, Copy)]
pub(crate) struct BoundAttn {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

pub(crate) struct BoundEncLayer {
    norm_attn: NodeId,
    attn: BoundAttn,
    norm_ff: NodeId,
    ff_in: NodeId,
    ff_out: NodeId,
}

pub(crate) struct BoundDecLayer {
    norm_self: NodeId,
    self_attn: BoundAttn,
    norm_cross: NodeId,
    cross_attn: BoundAttn,
    norm_ff: NodeId,
    ff_in: NodeId,
    ff_out: NodeId,
}

/// Tape leaf ids for every model tensor of one forward pass; the handle
/// used to pull per-parameter gradients back out after `backward`.
pub struct BoundModel {
    pub(crate) embedding: NodeId,
    pub(crate) enc: Vec<BoundEncLayer>,
    pub(crate) dec: Vec<BoundDecLayer>,
    pub(crate) enc_rel_bias: NodeId,
    pub(crate) dec_rel_bias: NodeId,
    pub(crate) enc_final_norm: NodeId,
    pub(crate) dec_final_norm: NodeId,
}

impl BoundModel {
    /// Inserts every parameter tensor as a tape leaf, in the canonical
    /// named order.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        let embedding = leaf(&params.embedding);
        let enc = params
            .enc_layers
            .iter()
            .map(|l| BoundEncLayer {
                norm_attn: leaf(&l.norm_attn),
                attn: BoundAttn {
                    wq: leaf(&l.attn.wq),
                    wk: leaf(&l.attn.wk),
                    wv: leaf(&l.attn.wv),
                    wo: leaf(&l.attn.wo),
                },
                norm_ff: leaf(&l.norm_ff),
                ff_in: leaf(&l.ff_in),
                ff_out: leaf(&l.ff_out),
            })
            .collect();
        let dec = params
            .dec_layers
            .iter()
            .map(|l| BoundDecLayer {
                norm_self: leaf(&l.norm_self),
                self_attn: BoundAttn {
                    wq: leaf(&l.self_attn.wq),
                    wk: leaf(&l.self_attn.wk),
                    wv: leaf(&l.self_attn.wv),
                    wo: leaf(&l.self_attn.wo),
                },
                norm_cross: leaf(&l.norm_cross),
                cross_attn: BoundAttn {
                    wq: leaf(&l.cross_attn.wq),
                    wk: leaf(&l.cross_attn.wk),
                    wv: leaf(&l.cross_attn.wv),
                    wo: leaf(&l.cross_attn.wo),
                },
                norm_ff: leaf(&l.norm_ff),
                ff_in: leaf(&l.ff_in),
                ff_out: leaf(&l.ff_out),
            })
            .collect();
        BoundModel {
            embedding,
            enc,
            dec,
            enc_rel_bias: leaf(&params.enc_rel_bias),
            dec_rel_bias: leaf(&params.dec_rel_bias),
            enc_final_norm: leaf(&params.enc_final_norm),
            dec_final_norm: leaf(&params.dec_final_norm),
        }
    }

    /// Leaf ids in the same order as `ModelParams::named_tensors`.
    pub fn named_ids(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = vec![("embedding".into(), self.embedding)];
        for (i, l) in self.enc.iter().enumerate() {
            out.push((format!("enc.{i}.norm_attn"), l.norm_attn));
            out.push((format!("enc.{i}.attn.wq"), l.attn.wq));
            out.push((format!("enc.{i}.attn.wk"), l.attn.wk));
            out.push((format!("enc.{i}.attn.wv"), l.attn.wv));
            out.push((format!("enc.{i}.attn.wo"), l.attn.wo));
            out.push((format!("enc.{i}.norm_ff"), l.norm_ff));
            out.push((format!("enc.{i}.ff_in"), l.ff_in));
            out.push((format!("enc.{i}.ff_out"), l.ff_out));
        }
        for (i, l) in self.dec.iter().enumerate() {
            out.push((format!("dec.{i}.norm_self"), l.norm_self));
            out.push((format!("dec.{i}.self.wq"), l.self_attn.wq));
            out.push((format!("dec.{i}.self.wk"), l.self_attn.wk));
            out.push((format!("dec.{i}.self.wv"), l.self_attn.wv));
            out.push((format!("dec.{i}.self.wo"), l.self_attn.wo));
            out.push((format!("dec.{i}.norm_cross"), l.norm_cross));
            out.push((format!("dec.{i}.cross.wq"), l.cross_attn.wq));
            out.push((format!("dec.{i}.cross.wk"), l.cross_attn.wk));
            out.push((format!("dec.{i}.cross.wv"), l.cross_attn.wv));
            out.push((format!("dec.{i}.cross.wo"), l.cross_attn.wo));
            out.push((format!("dec.{i}.norm_ff"), l.norm_ff));
            out.push((format!("dec.{i}.ff_in"), l.ff_in));
            out.push((format!("dec.{i}.ff_out"), l.ff_out));
        }
        out.push(("enc_rel_bias".into(), self.enc_rel_bias));
        out.push(("dec_rel_bias".into(), self.dec_rel_bias));
        out.push(("enc_final_norm".into(), self.enc_final_norm));
        out.push(("dec_final_norm".into(), self.dec_final_norm));
        out
    }
}

struct AttnInputs {
    /// Normalized queries [T, d].
    queries: NodeId,
    /// Normalized keys/values source [S, d].
    keys: NodeId,
    /// Optional (bias table leaf, bucket matrix).
    rel: Option<(NodeId, Arc<Vec<u16>>)>,
    /// Optional additive mask [T, S] (0 / -1e9), grad-free leaf.
    mask: Option<NodeId>,
}

fn multi_head_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    weights: &BoundAttn,
    inp: &AttnInputs,
) -> Result<NodeId, ModelError> {
    let dk = cfg.head_dim();
    let scale = (1.0 / (dk as f64).sqrt()) as f32;
    let q_all = tape.matmul(inp.queries, weights.wq)?;
    let k_all = tape.matmul(inp.keys, weights.wk)?;
    let v_all = tape.matmul(inp.keys, weights.wv)?;
    let t_len = tape.value(q_all).shape()[0];
    let s_len = tape.value(k_all).shape()[0];
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = tape.slice_cols(q_all, h * dk, dk)?;
        let k = tape.slice_cols(k_all, h * dk, dk)?;
        let v = tape.slice_cols(v_all, h * dk, dk)?;
        let mut scores = tape.matmul_nt(q, k)?;
        scores = tape.scale(scores, scale);
        if let Some((table, buckets)) = &inp.rel {
            let bias = tape.rel_bias(*table, buckets.clone(), h, t_len, s_len)?;
            scores = tape.add(scores, bias)?;
        }
        if let Some(mask) = inp.mask {
            scores = tape.add(scores, mask)?;
        }
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, v)?);
    }
    let concat = tape.concat_cols(&heads)?;
    Ok(tape.matmul(concat, weights.wo)?)
}

fn feed_forward(
    tape: &mut Tape,
    x: NodeId,
    ff_in: NodeId,
    ff_out: NodeId,
) -> Result<NodeId, ModelError> {
    let hidden = tape.matmul(x, ff_in)?;
    let act = tape.relu(hidden);
    Ok(tape.matmul(act, ff_out)?)
}

/// Additive pad mask [rows, cols]: columns at pad source positions are
/// pushed to -1e9 so their attention weight underflows to exactly zero.
fn pad_mask(tape: &mut Tape, rows: usize, src_ids: &[u32]) -> Option<NodeId> {
    if !src_ids.contains(&PAD_ID) {
        return None;
    }
    let cols = src_ids.len();
    let mut data = vec![0.0f32; rows * cols];
    for (j, &id) in src_ids.iter().enumerate() {
        if id == PAD_ID {
            for i in 0..rows {
                data[i * cols + j] = MASK_NEG;
            }
        }
    }
    Some(tape.leaf(Tensor::new(vec![rows, cols], data).expect("mask shape")))
}

fn causal_mask(tape: &mut Tape, len: usize) -> NodeId {
    let mut data = vec![0.0f32; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = MASK_NEG;
        }
    }
    tape.leaf(Tensor::new(vec![len, len], data).expect("mask shape"))
}

fn check_len(len: usize, cfg: &ModelConfig) -> Result<(), ModelError> {
    if len > cfg.max_context {
        return Err(ModelError::ContextOverflow {
            len,
            max: cfg.max_context,
        });
    }
    Ok(())
}

fn encoder_stack(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundModel,
    src_ids: &[u32],
) -> Result<NodeId, ModelError> {
    let s_len = src_ids.len();
    let mask = pad_mask(tape, s_len, src_ids);
    let buckets = bucket_matrix(s_len, s_len, true, cfg.rel_pos_buckets);
    let mut x = tape.embedding(bound.embedding, src_ids)?;
    for layer in &bound.enc {
        let normed = tape.rms_norm(x, layer.norm_attn)?;
        let attn = multi_head_attention(
            tape,
            cfg,
            &layer.attn,
            &AttnInputs {
                queries: normed,
                keys: normed,
                rel: Some((bound.enc_rel_bias, buckets.clone())),
                mask,
            },
        )?;
        x = tape.add(x, attn)?;
        let normed = tape.rms_norm(x, layer.norm_ff)?;
        let ff = feed_forward(tape, normed, layer.ff_in, layer.ff_out)?;
        x = tape.add(x, ff)?;
    }
    Ok(tape.rms_norm(x, bound.enc_final_norm)?)
}

/// Teacher-forced logits [|tgt_in|, vocab]: decoder position t sees tgt
/// positions <= t plus the (pad-masked) encoder states.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    src_ids: &[u32],
    tgt_in_ids: &[u32],
) -> Result<(NodeId, BoundModel), ModelError> {
    let cfg = &params.config;
    if src_ids.is_empty() {
        return Err(ModelError::EmptySource);
    }
    if tgt_in_ids.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    check_len(src_ids.len(), cfg)?;
    check_len(tgt_in_ids.len(), cfg)?;

    let bound = BoundModel::bind(tape, params);
    let enc_out = encoder_stack(tape, cfg, &bound, src_ids)?;

    let t_len = tgt_in_ids.len();
    let self_mask = causal_mask(tape, t_len);
    let cross_mask = pad_mask(tape, t_len, src_ids);
    let self_buckets = bucket_matrix(t_len, t_len, false, cfg.rel_pos_buckets);

    let mut y = tape.embedding(bound.embedding, tgt_in_ids)?;
    for layer in &bound.dec {
        let normed = tape.rms_norm(y, layer.norm_self)?;
        let attn = multi_head_attention(
            tape,
            cfg,
            &layer.self_attn,
            &AttnInputs {
                queries: normed,
                keys: normed,
                rel: Some((bound.dec_rel_bias, self_buckets.clone())),
                mask: Some(self_mask),
            },
        )?;
        y = tape.add(y, attn)?;
        let normed = tape.rms_norm(y, layer.norm_cross)?;
        let attn = multi_head_attention(
            tape,
            cfg,
            &layer.cross_attn,
            &AttnInputs {
                queries: normed,
                keys: enc_out,
                rel: None,
                mask: cross_mask,
            },
        )?;
        y = tape.add(y, attn)?;
        let normed = tape.rms_norm(y, layer.norm_ff)?;
        let ff = feed_forward(tape, normed, layer.ff_in, layer.ff_out)?;
        y = tape.add(y, ff)?;
    }
    let out = tape.rms_norm(y, bound.dec_final_norm)?;
    // Tied projection; the scale keeps logits O(1) at init.
    let scaled = tape.scale(out, (1.0 / (cfg.d_model as f64).sqrt()) as f32);
    let logits = tape.matmul_nt(scaled, bound.embedding)?;
    Ok((logits, bound))
}

/// Mean token NLL with the standard shift: decoder input is
/// `[pad] ++ tgt`, loss targets are `tgt ++ [eos]`.
pub fn nll(
    tape: &mut Tape,
    params: &ModelParams,
    src_ids: &[u32],
    tgt_ids: &[u32],
) -> Result<(NodeId, BoundModel), ModelError> {
    if tgt_ids.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let mut tgt_in = Vec::with_capacity(tgt_ids.len() + 1);
    tgt_in.push(PAD_ID);
    tgt_in.extend_from_slice(tgt_ids);
    let mut targets = tgt_ids.to_vec();
    targets.push(EOS_ID);
    let (logits, bound) = forward(tape, params, src_ids, &tgt_in)?;
    let loss = tape.cross_entropy(logits, &targets, PAD_ID)?;
    Ok((loss, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};
    use crate::tensor::Tape;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_context: 32,
            rel_pos_buckets: 8,
        }
    }

    #[test]
    fn logits_shape_is_target_by_vocab() {
        let params = init(&tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let (logits, _) = forward(&mut tape, &params, &[5, 6, 7, 8], &[9, 10, 11]).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 40]);
    }

    #[test]
    fn bound_names_match_param_names() {
        let params = init(&tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params);
        let a: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let b: Vec<String> = bound.named_ids().into_iter().map(|(n, _)| n).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_is_causal_under_target_edits() {
        let params = init(&tiny_cfg(), 3).unwrap();
        let src = [4u32, 5, 6, 7, 8];
        let tgt: Vec<u32> = (10..26).collect();
        let mut tape = Tape::new();
        let (base, _) = forward(&mut tape, &params, &src, &tgt).unwrap();
        let base_logits = tape.value(base).data().to_vec();
        let vocab = tiny_cfg().vocab_size;
        for j in 0..tgt.len() {
            let mut edited = tgt.clone();
            edited[j] = 3; // different token
            let mut tape2 = Tape::new();
            let (out, _) = forward(&mut tape2, &params, &src, &edited).unwrap();
            let edited_logits = tape2.value(out).data();
            // Positions before j are untouched by the edit.
            assert_eq!(
                &base_logits[..j * vocab],
                &edited_logits[..j * vocab],
                "edit at {j} leaked backwards"
            );
            // The edited position itself must change (embedding differs).
            let row = &edited_logits[j * vocab..(j + 1) * vocab];
            let base_row = &base_logits[j * vocab..(j + 1) * vocab];
            assert_ne!(row, base_row);
        }
    }

    #[test]
    fn appending_masked_pads_leaves_logits_unchanged() {
        let params = init(&tiny_cfg(), 5).unwrap();
        let src = [4u32, 5, 6, 7];
        let tgt_in = [0u32, 10, 11];
        let mut tape = Tape::new();
        let (a, _) = forward(&mut tape, &params, &src, &tgt_in).unwrap();
        let mut padded = src.to_vec();
        padded.extend_from_slice(&[PAD_ID; 3]);
        let mut tape2 = Tape::new();
        let (b, _) = forward(&mut tape2, &params, &padded, &tgt_in).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape2.value(b).data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut params = init(&tiny_cfg(), 1).unwrap();
        params.embedding = crate::tensor::Tensor::zeros(vec![40, 16]).with_grad();
        let mut tape = Tape::new();
        let (loss, _) = nll(&mut tape, &params, &[5, 6], &[7, 8, 9]).unwrap();
        let expect = (40f64).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn nll_rejects_empty_target() {
        let params = init(&tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            nll(&mut tape, &params, &[5, 6], &[]),
            Err(ModelError::EmptyTarget)
        ));
    }

    #[test]
    fn over_context_input_is_rejected() {
        let params = init(&tiny_cfg(), 1).unwrap();
        let long: Vec<u32> = (0..33).map(|i| 3 + i % 30).collect();
        let mut tape = Tape::new();
        assert!(matches!(
            forward(&mut tape, &params, &long, &[5]),
            Err(ModelError::ContextOverflow { len: 33, max: 32 })
        ));
    }

    #[test]
    fn causality_holds_across_preset_layer_counts() {
        // Narrow models at the preset layer depths; width is irrelevant
        // to the masking structure.
        for (enc, dec) in [(1usize, 1usize), (2, 2), (4, 4)] {
            let cfg = ModelConfig {
                vocab_size: 20,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_enc_layers: enc,
                n_dec_layers: dec,
                max_context: 16,
                rel_pos_buckets: 8,
            };
            let params = init(&cfg, 11).unwrap();
            let src = [3u32, 4, 5];
            let tgt: Vec<u32> = (6..12).collect();
            let mut tape = Tape::new();
            let (base, _) = forward(&mut tape, &params, &src, &tgt).unwrap();
            let base_logits = tape.value(base).data().to_vec();
            let j = 3;
            let mut edited = tgt.clone();
            edited[j] = 13;
            let mut tape2 = Tape::new();
            let (out, _) = forward(&mut tape2, &params, &src, &edited).unwrap();
            assert_eq!(
                &base_logits[..j * cfg.vocab_size],
                &tape2.value(out).data()[..j * cfg.vocab_size]
            );
        }
    }
}
