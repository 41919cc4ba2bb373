//! Span-corruption example construction for the unsupervised stages.
//!
//! Corruption masks an exact token budget: `round(rate * len)` tokens are
//! removed through non-adjacent spans whose count targets `rate * len /
//! mean_span`. Each span is replaced by one sentinel in the input
//! (ascending sentinel index left to right) and re-emitted behind the
//! same sentinel in the target, which ends with eos. `reconstruct` is the
//! exact inverse and is used by tests to certify the round trip.

use rand::Rng;
use thiserror::Error;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("corruption rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("mean span length {0} must be at least 1")]
    BadMeanSpan(f64),
    #[error("cannot corrupt an empty token sequence")]
    EmptyTokens,
    #[error("input tokens already contain reserved id {0}")]
    ReservedIdInInput(u32),
    #[error("vocabulary has no sentinel ids but {0} spans are required")]
    NoSentinels(usize),
    #[error("corruption needs {required} spans but only {available} sentinels exist")]
    TooManySpans { required: usize, available: usize },
    #[error("sentinel structure mismatch: {0}")]
    SentinelMismatch(String),
    #[error("target does not end with eos")]
    MissingEos,
}

/// Corrupted input plus sentinel-delimited reconstruction target.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingExample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub num_spans: usize,
}

/// Samples a span layout and corrupts. Deterministic given the rng state;
/// batch pipelines derive one stream per (seed, stage, example index).
pub fn corrupt(
    tokens: &[u32],
    rate: f64,
    mean_span: f64,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<DenoisingExample, DenoiseError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DenoiseError::BadRate(rate));
    }
    if mean_span < 1.0 {
        return Err(DenoiseError::BadMeanSpan(mean_span));
    }
    if tokens.is_empty() {
        return Err(DenoiseError::EmptyTokens);
    }
    for &t in tokens {
        if vocab.is_special(t) || vocab.is_sentinel(t) {
            return Err(DenoiseError::ReservedIdInInput(t));
        }
    }
    let len = tokens.len();
    let mut n_noise = (rate * len as f64).round() as usize;
    if rate > 0.0 && len >= 2 {
        n_noise = n_noise.max(1); // no degenerate denoising batches
    }
    n_noise = n_noise.min(len);
    if n_noise == 0 {
        return corrupt_with_spans(tokens, &[], vocab);
    }

    let n_plain = len - n_noise;
    let mut n_spans = (n_noise as f64 / mean_span).round() as usize;
    n_spans = n_spans.clamp(1, n_noise).min(n_plain + 1);
    if vocab.num_sentinels() == 0 {
        return Err(DenoiseError::NoSentinels(n_spans));
    }
    n_spans = n_spans.min(vocab.num_sentinels());

    // Split the noise budget into n_spans parts, each >= 1.
    let span_lens = composition_min_one(n_noise, n_spans, rng);
    // Split the plain tokens into n_spans + 1 gaps; interior gaps >= 1 so
    // spans never touch.
    let slack = n_plain - (n_spans - 1);
    let mut gaps = composition_free(slack, n_spans + 1, rng);
    for gap in gaps.iter_mut().take(n_spans).skip(1) {
        *gap += 1;
    }

    let mut spans = Vec::with_capacity(n_spans);
    let mut pos = 0usize;
    for i in 0..n_spans {
        pos += gaps[i];
        spans.push((pos, span_lens[i]));
        pos += span_lens[i];
    }
    corrupt_with_spans(tokens, &spans, vocab)
}

/// Builds the example for an explicit, already-validated span layout
/// given as (start, length) pairs in ascending, non-adjacent order.
pub fn corrupt_with_spans(
    tokens: &[u32],
    spans: &[(usize, usize)],
    vocab: &Vocabulary,
) -> Result<DenoisingExample, DenoiseError> {
    if spans.len() > vocab.num_sentinels() {
        return Err(DenoiseError::TooManySpans {
            required: spans.len(),
            available: vocab.num_sentinels(),
        });
    }
    let mut input_ids = Vec::with_capacity(tokens.len());
    let mut target_ids = Vec::new();
    let mut cursor = 0usize;
    for (i, &(start, len)) in spans.iter().enumerate() {
        debug_assert!(start >= cursor && len >= 1 && start + len <= tokens.len());
        input_ids.extend_from_slice(&tokens[cursor..start]);
        input_ids.push(vocab.sentinel(i));
        target_ids.push(vocab.sentinel(i));
        target_ids.extend_from_slice(&tokens[start..start + len]);
        cursor = start + len;
    }
    input_ids.extend_from_slice(&tokens[cursor..]);
    target_ids.push(vocab.eos());
    Ok(DenoisingExample {
        input_ids,
        target_ids,
        num_spans: spans.len(),
    })
}

/// n parts, each >= 1, summing to total.
fn composition_min_one(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = composition_free(total - parts, parts, rng);
    for x in out.iter_mut() {
        *x += 1;
    }
    out
}

/// n non-negative parts summing to total, via sorted uniform cut points.
fn composition_free(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Splices each target span back at its sentinel position; exact inverse
/// of [`corrupt`]. Fails on any sentinel disagreement between the two
/// sequences.
pub fn reconstruct(
    input_ids: &[u32],
    target_ids: &[u32],
    vocab: &Vocabulary,
) -> Result<Vec<u32>, DenoiseError> {
    if target_ids.last() != Some(&vocab.eos()) {
        return Err(DenoiseError::MissingEos);
    }
    // Parse the target into sentinel-keyed spans, in order of appearance.
    let mut spans: Vec<(u32, Vec<u32>)> = Vec::new();
    for &t in &target_ids[..target_ids.len() - 1] {
        if vocab.is_sentinel(t) {
            if spans.iter().any(|(s, _)| *s == t) {
                return Err(DenoiseError::SentinelMismatch(format!(
                    "sentinel {t} repeats in target"
                )));
            }
            spans.push((t, Vec::new()));
        } else {
            match spans.last_mut() {
                Some((_, toks)) => toks.push(t),
                None => {
                    return Err(DenoiseError::SentinelMismatch(
                        "target tokens before first sentinel".into(),
                    ))
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut next_span = 0usize;
    for &t in input_ids {
        if vocab.is_sentinel(t) {
            let (expected, toks) = spans.get(next_span).ok_or_else(|| {
                DenoiseError::SentinelMismatch(format!(
                    "input sentinel {t} has no matching target span"
                ))
            })?;
            if *expected != t {
                return Err(DenoiseError::SentinelMismatch(format!(
                    "input sentinel {t} but target has {expected} at position {next_span}"
                )));
            }
            out.extend_from_slice(toks);
            next_span += 1;
        } else {
            out.push(t);
        }
    }
    if next_span != spans.len() {
        return Err(DenoiseError::SentinelMismatch(format!(
            "target has {} spans but input names {next_span}",
            spans.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn test_vocab() -> Vocabulary {
        let corpus: Vec<String> = vec!["abcdefgh ijklmnop qrstuvwx".into(); 2];
        Vocabulary::train(&corpus, 300, 20).unwrap()
    }

    /// Byte-token ids, guaranteed free of specials and sentinels.
    fn toks(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| 10 + (i % 200)).collect()
    }

    #[test]
    fn zero_rate_is_identity() {
        let v = test_vocab();
        let t = toks(12);
        let mut r = rng::stream(&[1]);
        let ex = corrupt(&t, 0.0, 3.0, &v, &mut r).unwrap();
        assert_eq!(ex.input_ids, t);
        assert_eq!(ex.target_ids, vec![v.eos()]);
        assert_eq!(ex.num_spans, 0);
        assert_eq!(reconstruct(&ex.input_ids, &ex.target_ids, &v).unwrap(), t);
    }

    #[test]
    fn definitional_layout_for_single_span() {
        // Tokens 0..10 with one span covering positions 3..=5.
        let v = test_vocab();
        let t = toks(10);
        let ex = corrupt_with_spans(&t, &[(3, 3)], &v).unwrap();
        let s0 = v.sentinel(0);
        let mut want_input = t[..3].to_vec();
        want_input.push(s0);
        want_input.extend_from_slice(&t[6..]);
        assert_eq!(ex.input_ids, want_input);
        let mut want_target = vec![s0];
        want_target.extend_from_slice(&t[3..6]);
        want_target.push(v.eos());
        assert_eq!(ex.target_ids, want_target);
    }

    #[test]
    fn corrupted_fraction_tracks_rate() {
        let v = test_vocab();
        let t = toks(512);
        let mut frac_sum = 0.0f64;
        let n = 2000;
        for i in 0..n {
            let mut r = rng::stream(&[7, i]);
            let ex = corrupt(&t, 0.15, 3.0, &v, &mut r).unwrap();
            let kept = ex.input_ids.iter().filter(|&&x| !v.is_sentinel(x)).count();
            frac_sum += (t.len() - kept) as f64 / t.len() as f64;
        }
        let mean = frac_sum / n as f64;
        assert!((mean - 0.15).abs() < 0.01, "mean corrupted fraction {mean}");
    }

    #[test]
    fn same_seed_same_example() {
        let v = test_vocab();
        let t = toks(64);
        let a = corrupt(&t, 0.2, 2.0, &v, &mut rng::stream(&[3])).unwrap();
        let b = corrupt(&t, 0.2, 2.0, &v, &mut rng::stream(&[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spans_never_touch() {
        let v = test_vocab();
        let t = toks(100);
        for seed in 0..50 {
            let ex = corrupt(&t, 0.5, 1.0, &v, &mut rng::stream(&[seed])).unwrap();
            for win in ex.input_ids.windows(2) {
                assert!(
                    !(v.is_sentinel(win[0]) && v.is_sentinel(win[1])),
                    "adjacent sentinels in input"
                );
            }
        }
    }

    #[test]
    fn rate_above_zero_forces_a_span() {
        let v = test_vocab();
        let t = toks(40);
        // round(0.01 * 40) = 0 but a span is still forced.
        let ex = corrupt(&t, 0.01, 3.0, &v, &mut rng::stream(&[5])).unwrap();
        assert_eq!(ex.num_spans, 1);
    }

    #[test]
    fn reserved_input_ids_are_rejected() {
        let v = test_vocab();
        let bad = vec![10, v.sentinel(0), 11];
        assert!(matches!(
            corrupt(&bad, 0.1, 3.0, &v, &mut rng::stream(&[1])),
            Err(DenoiseError::ReservedIdInInput(_))
        ));
    }

    #[test]
    fn token_conservation_identity() {
        let v = test_vocab();
        let t = toks(120);
        for seed in 0..20 {
            let ex = corrupt(&t, 0.3, 3.0, &v, &mut rng::stream(&[11, seed])).unwrap();
            // Non-sentinel content is conserved: input keeps len - noise
            // tokens plus s sentinels; target keeps noise tokens plus s
            // sentinels plus eos.
            let s = ex.num_spans;
            assert_eq!(
                (ex.input_ids.len() - s) + (ex.target_ids.len() - s - 1),
                t.len()
            );
        }
    }

    #[test]
    fn target_missing_sentinel_is_structure_error() {
        let v = test_vocab();
        let t = toks(20);
        let ex = corrupt(&t, 0.3, 2.0, &v, &mut rng::stream(&[2])).unwrap();
        assert!(ex.num_spans >= 1);
        // Drop the first sentinel (and its span) from the target.
        let mut broken = ex.target_ids.clone();
        let second = broken
            .iter()
            .skip(1)
            .position(|&x| v.is_sentinel(x))
            .map(|p| p + 1)
            .unwrap_or(broken.len() - 1);
        broken.drain(0..second);
        assert!(matches!(
            reconstruct(&ex.input_ids, &broken, &v),
            Err(DenoiseError::SentinelMismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reconstruct_inverts_corrupt(
            len in 2usize..160,
            seed in any::<u64>(),
            rate_idx in 0usize..4,
            span_idx in 0usize..3,
        ) {
            let rates = [0.0, 0.05, 0.15, 0.5];
            let spans = [1.0, 3.0, 10.0];
            let v = test_vocab();
            let t = toks(len);
            let ex = corrupt(&t, rates[rate_idx], spans[span_idx], &v, &mut rng::stream(&[seed])).unwrap();
            prop_assert_eq!(reconstruct(&ex.input_ids, &ex.target_ids, &v).unwrap(), t);
        }
    }
}
