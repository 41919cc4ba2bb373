//! Central finite-difference oracles for every differentiable primitive
//! and for the full model NLL.
//!
//! The oracle is independent of the backward pass: it re-evaluates the
//! forward function at x ± h (h = 1e-3) and forms the difference quotient
//! in f64, reading scalar losses through the tape's 64-bit reduction
//! values.

use midsum_core::model::{self, ModelConfig};
use midsum_core::rng;
use midsum_core::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
/// Precision limit of the oracle itself: losses pass through f32-stored
/// intermediates, so difference quotients carry an absolute noise of
/// about eps_f32 * |loss| / (2h) ~ 1.5e-4. Elements whose gradients sit
/// below that floor are compared absolutely against it; everything above
/// it must meet the relative bound.
const ABS_FLOOR: f64 = 3e-4;

fn random_data(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(&[seed, 0x6772_6164]);
    (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()
}

fn check_grad(
    label: &str,
    analytic: &[f32],
    data: &[f32],
    mut eval: impl FnMut(&[f32]) -> f64,
) {
    assert_eq!(analytic.len(), data.len(), "{label}: grad length");
    for i in 0..data.len() {
        let mut plus = data.to_vec();
        plus[i] += H as f32;
        let mut minus = data.to_vec();
        minus[i] -= H as f32;
        // 64-bit difference arithmetic over the actually-applied step.
        let step = (plus[i] as f64) - (minus[i] as f64);
        let numeric = (eval(&plus) - eval(&minus)) / step;
        let a = analytic[i] as f64;
        let diff = (a - numeric).abs();
        if diff <= ABS_FLOOR {
            continue;
        }
        let rel = diff / a.abs().max(numeric.abs());
        assert!(
            rel < REL_TOL,
            "{label}[{i}]: analytic {a} vs numeric {numeric} (rel {rel})"
        );
    }
}

/// Checks d(loss)/d(input) for a scalar-valued tape program, where the
/// loss is a weighted sum of the primitive's output so gradients are
/// non-uniform.
fn check_primitive(
    label: &str,
    shape: &[usize],
    seed: u64,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
) {
    let numel: usize = shape.iter().product();
    let data = random_data(numel, seed);
    let weights = random_data(0, 0); // placeholder to keep signature simple
    let _ = weights;

    let eval = |x: &[f32]| -> f64 {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap().with_grad());
        let loss = build(&mut tape, input);
        tape.scalar_value(loss)
    };
    let mut tape = Tape::new();
    let input = tape.leaf(
        Tensor::new(shape.to_vec(), data.clone())
            .unwrap()
            .with_grad(),
    );
    let loss = build(&mut tape, input);
    let grads = tape.backward(loss).expect("backward");
    let analytic = grads.get(input).expect("input grad");
    check_grad(label, analytic, &data, eval);
}

/// Weighted sum of an arbitrary tensor node, so the loss is scalar and
/// every output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(node).shape().to_vec();
    let numel: usize = shape.iter().product();
    let w = Tensor::new(shape, random_data(numel, seed ^ 0xabcdef)).unwrap();
    let w = tape.leaf(w);
    let prod = tape.mul(node, w).unwrap();
    tape.sum(prod)
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        // Left operand.
        check_primitive("matmul lhs", &[3, 4], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![4, 2], random_data(8, seed + 90)).unwrap());
            let out = tape.matmul(x, other).unwrap();
            weighted_sum(tape, out, seed)
        });
        // Right operand.
        check_primitive("matmul rhs", &[4, 2], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![3, 4], random_data(12, seed + 91)).unwrap());
            let out = tape.matmul(other, x).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn matmul_nt_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("matmul_nt lhs", &[3, 4], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![5, 4], random_data(20, seed + 70)).unwrap());
            let out = tape.matmul_nt(x, other).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("matmul_nt rhs", &[5, 4], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![3, 4], random_data(12, seed + 71)).unwrap());
            let out = tape.matmul_nt(other, x).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn add_mul_scale_relu_gradients() {
    for seed in 0..5u64 {
        check_primitive("add", &[2, 5], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![2, 5], random_data(10, seed + 30)).unwrap());
            let out = tape.add(x, other).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("mul", &[2, 5], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![2, 5], random_data(10, seed + 31)).unwrap());
            let out = tape.mul(x, other).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("scale", &[2, 5], seed, |tape, x| {
            let out = tape.scale(x, 0.37);
            weighted_sum(tape, out, seed)
        });
        // Shift values away from the kink at zero.
        check_primitive("relu", &[2, 5], seed, |tape, x| {
            let shift = tape.leaf(Tensor::new(vec![2, 5], vec![0.35; 10]).unwrap());
            let shifted = tape.add(x, shift).unwrap();
            let out = tape.relu(shifted);
            weighted_sum(tape, out, seed)
        });
        check_primitive("add_row matrix", &[3, 4], seed, |tape, x| {
            let row = tape.leaf(Tensor::new(vec![4], random_data(4, seed + 32)).unwrap());
            let out = tape.add_row(x, row).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("add_row bias", &[4], seed, |tape, x| {
            let mat = tape.leaf(Tensor::new(vec![3, 4], random_data(12, seed + 33)).unwrap());
            let out = tape.add_row(mat, x).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("softmax_rows", &[3, 5], seed, |tape, x| {
            let out = tape.softmax_rows(x).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn rms_norm_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("rms_norm input", &[3, 6], seed, |tape, x| {
            let gain = tape.leaf(Tensor::new(vec![6], random_data(6, seed + 50)).unwrap());
            let out = tape.rms_norm(x, gain).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("rms_norm gain", &[6], seed, |tape, x| {
            let mat = tape.leaf(Tensor::new(vec![3, 6], random_data(18, seed + 51)).unwrap());
            let out = tape.rms_norm(mat, x).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn embedding_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("embedding", &[7, 3], seed, |tape, x| {
            let out = tape.embedding(x, &[2, 0, 2, 5]).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn rel_bias_gradients_match_finite_differences() {
    use std::sync::Arc;
    for seed in 0..5u64 {
        check_primitive("rel_bias", &[6, 2], seed, |tape, x| {
            let buckets = Arc::new(vec![0u16, 1, 2, 5, 5, 3]);
            let out = tape.rel_bias(x, buckets, 1, 2, 3).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn slice_concat_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("slice_cols", &[3, 6], seed, |tape, x| {
            let out = tape.slice_cols(x, 2, 3).unwrap();
            weighted_sum(tape, out, seed)
        });
        check_primitive("concat_cols", &[3, 2], seed, |tape, x| {
            let other = tape.leaf(Tensor::new(vec![3, 3], random_data(9, seed + 60)).unwrap());
            let out = tape.concat_cols(&[x, other]).unwrap();
            weighted_sum(tape, out, seed)
        });
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        check_primitive("cross_entropy", &[4, 6], seed, |tape, x| {
            tape.cross_entropy(x, &[1, 5, 0, 3], u32::MAX).unwrap()
        });
        // With an ignored position.
        check_primitive("cross_entropy ignore", &[4, 6], seed, |tape, x| {
            tape.cross_entropy(x, &[1, 9, 0, 3], 9).unwrap()
        });
    }
}

#[test]
fn random_two_layer_network_gradients() {
    // relu(x W1) W2 -> cross entropy; both weight matrices checked.
    for seed in 0..5u64 {
        let x_data = random_data(4 * 6, seed + 200);
        let build = |tape: &mut Tape, w1: NodeId, w2: NodeId| -> NodeId {
            let x = tape.leaf(Tensor::new(vec![4, 6], x_data.clone()).unwrap());
            let h = tape.matmul(x, w1).unwrap();
            let a = tape.relu(h);
            let logits = tape.matmul(a, w2).unwrap();
            tape.cross_entropy(logits, &[2, 0, 4, 1], u32::MAX).unwrap()
        };
        let w1_data = random_data(6 * 5, seed + 201);
        let w2_data = random_data(5 * 6, seed + 202);
        for target in 0..2 {
            let eval = |x: &[f32]| -> f64 {
                let mut tape = Tape::new();
                let (d1, d2) = if target == 0 {
                    (x.to_vec(), w2_data.clone())
                } else {
                    (w1_data.clone(), x.to_vec())
                };
                let w1 = tape.leaf(Tensor::new(vec![6, 5], d1).unwrap().with_grad());
                let w2 = tape.leaf(Tensor::new(vec![5, 6], d2).unwrap().with_grad());
                let loss = build(&mut tape, w1, w2);
                tape.scalar_value(loss)
            };
            let mut tape = Tape::new();
            let w1 = tape.leaf(Tensor::new(vec![6, 5], w1_data.clone()).unwrap().with_grad());
            let w2 = tape.leaf(Tensor::new(vec![5, 6], w2_data.clone()).unwrap().with_grad());
            let loss = build(&mut tape, w1, w2);
            let grads = tape.backward(loss).unwrap();
            let (node, data) = if target == 0 {
                (w1, &w1_data)
            } else {
                (w2, &w2_data)
            };
            check_grad(
                &format!("two_layer w{} seed {seed}", target + 1),
                grads.get(node).unwrap(),
                data,
                eval,
            );
        }
    }
}

#[test]
fn full_model_nll_gradients_match_finite_differences() {
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
    let src = [3u32, 4, 5, 6];
    let tgt = [7u32, 8, 9];

    for seed in 0..5u64 {
        let params = model::init(&cfg, seed).unwrap();
        let mut tape = Tape::new();
        let (loss, bound) = model::nll(&mut tape, &params, &src, &tgt).unwrap();
        let grads = tape.backward(loss).expect("backward");

        for ((name, id), (_, tensor)) in bound.named_ids().iter().zip(params.named_tensors()) {
            let analytic = grads.get(*id).expect("param grad").to_vec();
            let data = tensor.data().to_vec();
            let shape = tensor.shape().to_vec();
            let eval = |x: &[f32]| -> f64 {
                let mut perturbed = params.clone();
                for (n, t) in perturbed.named_tensors_mut() {
                    if &n == name {
                        *t = Tensor::new(shape.clone(), x.to_vec()).unwrap().with_grad();
                    }
                }
                let mut tape = Tape::new();
                let (loss, _) = model::nll(&mut tape, &perturbed, &src, &tgt).unwrap();
                tape.scalar_value(loss)
            };
            check_grad(&format!("nll/{name} seed {seed}"), &analytic, &data, eval);
        }
    }
}
