//! Greedy and length-normalized beam-search generation.
//!
//! Both decoders run over a [`TokenScorer`], so tests can drive them with
//! synthetic probability tables and exhaustive oracles as well as with
//! the transformer. All tie-breaking is deterministic: lowest token id
//! first, then hypothesis insertion order.

use thiserror::Error;

use crate::model::{DecodeSession, DecoderCache, ModelError, ModelParams};
use crate::tokenizer::{EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("cannot decode from an empty source sequence")]
    EmptySource,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Next-token distribution provider with explicit, cloneable decoding
/// state.
pub trait TokenScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> u32;
    /// State before the first generated token, with its next-token
    /// log-probabilities.
    fn start(&self) -> Result<(Self::State, Vec<f64>), DecodeError>;
    /// Feeds one token, returning the successor state and the
    /// log-probabilities that follow it.
    fn advance(
        &self,
        state: &Self::State,
        token: u32,
    ) -> Result<(Self::State, Vec<f64>), DecodeError>;
}

/// One decoding hypothesis. `steps` counts scored tokens (the terminating
/// eos included when present), which is the length-normalization base.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    pub steps: usize,
}

impl BeamHypothesis {
    /// Length-normalized score: log-probability / steps^alpha.
    pub fn normalized(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.steps.max(1) as f64).powf(length_penalty)
    }
}

fn argmax_lowest_id(log_probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &lp) in log_probs.iter().enumerate().skip(1) {
        if lp > log_probs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding over any scorer: argmax per step, ties to the lowest
/// token id, stopping at eos or max_len. The returned hypothesis carries
/// the accumulated log-probability for score comparisons.
pub fn greedy_with<S: TokenScorer>(
    scorer: &S,
    max_len: usize,
) -> Result<BeamHypothesis, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let (mut state, mut log_probs) = scorer.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0f64;
    let mut steps = 0usize;
    for _ in 0..max_len {
        let token = argmax_lowest_id(&log_probs);
        log_prob += log_probs[token as usize];
        steps += 1;
        if token == scorer.eos_id() {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
                steps,
            });
        }
        tokens.push(token);
        let (next, lp) = scorer.advance(&state, token)?;
        state = next;
        log_probs = lp;
    }
    Ok(BeamHypothesis {
        tokens,
        log_prob,
        finished: true,
        steps,
    })
}

struct Alive<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
    log_probs: Vec<f64>,
}

/// Standard length-normalized beam search. Each step expands every live
/// hypothesis over the full vocabulary, keeps the top `beam_size`
/// candidates by cumulative log-probability, and retires those ending in
/// eos (or hitting max_len) into the finished pool; nothing ever extends
/// past eos. Returns finished hypotheses sorted by normalized score.
pub fn beam_with<S: TokenScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<BeamHypothesis>, DecodeError> {
    if beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let eos = scorer.eos_id();
    let (state, log_probs) = scorer.start()?;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        log_probs,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 1..=max_len {
        // (cumulative, hyp index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            for (v, &lp) in hyp.log_probs.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, h, v as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        candidates.truncate(beam_size);

        let mut next_alive = Vec::with_capacity(candidates.len());
        for (cum, h, token) in candidates {
            let parent = &alive[h];
            if token == eos {
                finished.push(BeamHypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: cum,
                    finished: true,
                    steps: step,
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(token);
            if step == max_len {
                finished.push(BeamHypothesis {
                    tokens,
                    log_prob: cum,
                    finished: true,
                    steps: step,
                });
                continue;
            }
            let (state, log_probs) = scorer.advance(&parent.state, token)?;
            next_alive.push(Alive {
                tokens,
                log_prob: cum,
                state,
                log_probs,
            });
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }

    // Stable sort keeps insertion order on exact ties.
    finished.sort_by(|a, b| {
        b.normalized(length_penalty)
            .partial_cmp(&a.normalized(length_penalty))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(finished)
}

/// Transformer-backed scorer: the state is an incremental decoder cache
/// primed with the pad start token.
pub struct TransformerScorer<'a> {
    session: DecodeSession<'a>,
}

impl<'a> TransformerScorer<'a> {
    pub fn new(params: &'a ModelParams, src_ids: &[u32]) -> Result<Self, DecodeError> {
        if src_ids.is_empty() {
            return Err(DecodeError::EmptySource);
        }
        Ok(TransformerScorer {
            session: DecodeSession::new(params, src_ids)?,
        })
    }

    fn log_softmax(logits: &[f32]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &l in logits {
            sum += ((l as f64) - max).exp();
        }
        let lse = max + sum.ln();
        logits.iter().map(|&l| l as f64 - lse).collect()
    }
}

impl<'a> TokenScorer for TransformerScorer<'a> {
    type State = DecoderCache;

    fn vocab_size(&self) -> usize {
        self.session.vocab_size()
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>), DecodeError> {
        let mut cache = self.session.empty_cache();
        let logits = self.session.step(&mut cache, PAD_ID)?;
        Ok((cache, Self::log_softmax(&logits)))
    }

    fn advance(
        &self,
        state: &Self::State,
        token: u32,
    ) -> Result<(Self::State, Vec<f64>), DecodeError> {
        let mut cache = state.clone();
        let logits = self.session.step(&mut cache, token)?;
        Ok((cache, Self::log_softmax(&logits)))
    }
}

/// Greedy generation from findings token ids.
pub fn greedy(
    params: &ModelParams,
    src_ids: &[u32],
    max_len: usize,
) -> Result<Vec<u32>, DecodeError> {
    let scorer = TransformerScorer::new(params, src_ids)?;
    Ok(greedy_with(&scorer, max_len)?.tokens)
}

/// Beam-search generation; returns the best finished hypothesis under
/// length normalization.
pub fn beam(
    params: &ModelParams,
    src_ids: &[u32],
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<u32>, DecodeError> {
    let scorer = TransformerScorer::new(params, src_ids)?;
    let hyps = beam_with(&scorer, beam_size, max_len, length_penalty)?;
    Ok(hyps.into_iter().next().expect("beam pool non-empty").tokens)
}
