//! Four-axis evaluation: ROUGE-L, a METEOR variant, an embedding-based
//! semantic score over this crate's own encoder, and a lexicon-based
//! entity F1.
//!
//! The metric tokenizer (lowercase, split on non-alphanumeric) is
//! independent of the model tokenizer, so lexical metric values are
//! model-agnostic. The METEOR variant keeps exact + stem-stripped unigram
//! matching with the canonical 9:1 recall weighting and cube chunk
//! penalty, but drops synonym tables. The embedding score matches
//! contextual token states from the crate's encoder greedily, not an
//! external pretrained model, so its absolute values are not comparable
//! to published numbers. Entity extraction is a longest-match lexicon
//! scan with window-3 negation, reducing relations to (entity, polarity)
//! pairs.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{encode_states, ModelError, ModelParams};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("lexicon file has no terms")]
    EmptyLexicon,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Precision/recall/F1 triple; single-value metrics fill every slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub const ZERO: Score = Score {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_pr(precision: f64, recall: f64) -> Score {
        Score {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metric tokenizer: lowercase, split on non-alphanumeric.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Token-level longest-common-subsequence F-measure.
pub fn rouge_l(candidate: &str, reference: &str) -> Score {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return Score::ZERO;
    }
    let lcs = lcs_len(&c, &r) as f64;
    Score::from_pr(lcs / c.len() as f64, lcs / r.len() as f64)
}

/// Suffix-stripping stemmer used by the METEOR variant: removes one of
/// `ing`/`ed`/`s`, undoubling a trailing doubled consonant after
/// `ing`/`ed` (running -> run, stopped -> stop).
pub fn stem(word: &str) -> String {
    let undouble = |s: &str| -> String {
        let b = s.as_bytes();
        if b.len() >= 2
            && b[b.len() - 1] == b[b.len() - 2]
            && !matches!(b[b.len() - 1], b'a' | b'e' | b'i' | b'o' | b'u')
        {
            s[..s.len() - 1].to_string()
        } else {
            s.to_string()
        }
    };
    if word.len() > 5 && word.ends_with("ing") {
        undouble(&word[..word.len() - 3])
    } else if word.len() > 4 && word.ends_with("ed") {
        undouble(&word[..word.len() - 2])
    } else if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

/// Matching statistics behind [`meteor_lite`]; exposed so tests can
/// evaluate the closed-form score independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub chunks: usize,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Deterministic two-stage alignment: exact surface matches first (in
/// candidate order, earliest unmatched reference token), then
/// stem-equality matches over what remains.
pub fn meteor_alignment(candidate: &str, reference: &str) -> MeteorAlignment {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    let mut r_used = vec![false; r.len()];
    let mut pair_of_c: Vec<Option<usize>> = vec![None; c.len()];
    for (stage, key) in [
        (0, &(|w: &str| w.to_string()) as &dyn Fn(&str) -> String),
        (1, &(|w: &str| stem(w)) as &dyn Fn(&str) -> String),
    ] {
        let _ = stage;
        for (i, cw) in c.iter().enumerate() {
            if pair_of_c[i].is_some() {
                continue;
            }
            let ck = key(cw);
            for (j, rw) in r.iter().enumerate() {
                if !r_used[j] && key(rw) == ck {
                    r_used[j] = true;
                    pair_of_c[i] = Some(j);
                    break;
                }
            }
        }
    }
    let pairs: Vec<(usize, usize)> = pair_of_c
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let mut chunks = 0usize;
    for (k, (ci, rj)) in pairs.iter().enumerate() {
        if k == 0 || pairs[k - 1].0 + 1 != *ci || pairs[k - 1].1 + 1 != *rj {
            chunks += 1;
        }
    }
    MeteorAlignment {
        matches: pairs.len(),
        chunks,
        candidate_len: c.len(),
        reference_len: r.len(),
    }
}

/// Closed-form score for an alignment: F_mean = 10PR/(R+9P), penalty =
/// 0.5 (chunks/matches)^3, score = F_mean (1 - penalty).
pub fn meteor_score_from(alignment: &MeteorAlignment) -> Score {
    if alignment.matches == 0 || alignment.candidate_len == 0 || alignment.reference_len == 0 {
        return Score::ZERO;
    }
    let m = alignment.matches as f64;
    let p = m / alignment.candidate_len as f64;
    let r = m / alignment.reference_len as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (alignment.chunks as f64 / m).powi(3);
    Score {
        precision: p,
        recall: r,
        f1: f_mean * (1.0 - penalty),
    }
}

/// Unigram-matching metric with recall-weighted harmonic mean and chunk
/// fragmentation penalty; the final score sits in the f1 slot.
pub fn meteor_lite(candidate: &str, reference: &str) -> Score {
    meteor_score_from(&meteor_alignment(candidate, reference))
}

/// Greedy-matching semantic similarity over the crate's own contextual
/// encoder states.
pub fn embed_score(
    candidate: &str,
    reference: &str,
    params: &ModelParams,
    vocab: &Vocabulary,
) -> Result<Score, MetricError> {
    let c_ids = vocab.encode(candidate);
    let r_ids = vocab.encode(reference);
    if c_ids.is_empty() || r_ids.is_empty() {
        return Ok(Score::ZERO);
    }
    let c_states = encode_states(params, &c_ids)?;
    let r_states = encode_states(params, &r_ids)?;
    let cosine = |a: &[f32], b: &[f32]| -> f64 {
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            dot += *x as f64 * *y as f64;
            na += *x as f64 * *x as f64;
            nb += *y as f64 * *y as f64;
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    };
    let mut recall = 0.0f64;
    for i in 0..r_states.len {
        let mut best = f64::NEG_INFINITY;
        for j in 0..c_states.len {
            best = best.max(cosine(r_states.row(i), c_states.row(j)));
        }
        recall += best;
    }
    recall /= r_states.len as f64;
    let mut precision = 0.0f64;
    for j in 0..c_states.len {
        let mut best = f64::NEG_INFINITY;
        for i in 0..r_states.len {
            best = best.max(cosine(c_states.row(j), r_states.row(i)));
        }
        precision += best;
    }
    precision /= c_states.len as f64;
    Ok(Score {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

/// Normalized finding/anatomy phrases plus negation markers for the
/// entity metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityLexicon {
    /// Tokenized terms, longest first so the scan greedily prefers
    /// multiword phrases.
    terms: Vec<Vec<String>>,
    negations: Vec<Vec<String>>,
}

impl EntityLexicon {
    pub fn new(terms: &[&str], negations: &[&str]) -> Result<Self, MetricError> {
        let mut toks: Vec<Vec<String>> = terms
            .iter()
            .map(|t| metric_tokens(t))
            .filter(|t| !t.is_empty())
            .collect();
        toks.sort();
        toks.dedup();
        toks.sort_by_key(|t| std::cmp::Reverse(t.len()));
        if toks.is_empty() {
            return Err(MetricError::EmptyLexicon);
        }
        let negs = negations
            .iter()
            .map(|t| metric_tokens(t))
            .filter(|t| !t.is_empty())
            .collect();
        Ok(EntityLexicon {
            terms: toks,
            negations: negs,
        })
    }

    /// Default lexicon: the synthetic corpus' finding and anatomy
    /// vocabularies with the standard negation modifiers.
    pub fn radiology_default() -> Self {
        let mut terms: Vec<&str> = crate::corpus::FINDING_TERMS.to_vec();
        terms.extend_from_slice(&crate::corpus::ANATOMY_SITES);
        EntityLexicon::new(&terms, &["no", "without", "negative for"])
            .expect("built-in lexicon is non-empty")
    }

    /// Lexicon file: one term per line, `#` comments, negation markers
    /// under a `[negation]` section.
    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = fs::read_to_string(path)?;
        let mut terms: Vec<String> = Vec::new();
        let mut negations: Vec<String> = Vec::new();
        let mut in_negation = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.eq_ignore_ascii_case("[negation]") {
                in_negation = true;
                continue;
            }
            if in_negation {
                negations.push(line.to_string());
            } else {
                terms.push(line.to_string());
            }
        }
        let term_refs: Vec<&str> = terms.iter().map(String::as_str).collect();
        let neg_refs: Vec<&str> = negations.iter().map(String::as_str).collect();
        EntityLexicon::new(&term_refs, &neg_refs)
    }

    /// Longest-match scan with window-3 negation detection; returns the
    /// set of (term, positive-polarity) pairs.
    pub fn extract(&self, text: &str) -> HashSet<(String, bool)> {
        let tokens = metric_tokens(text);
        let mut out = HashSet::new();
        let mut i = 0usize;
        while i < tokens.len() {
            let mut matched = None;
            for term in &self.terms {
                if i + term.len() <= tokens.len() && tokens[i..i + term.len()] == term[..] {
                    matched = Some(term);
                    break;
                }
            }
            match matched {
                Some(term) => {
                    let window_start = i.saturating_sub(3);
                    let window = &tokens[window_start..i];
                    let negated = self.negations.iter().any(|neg| {
                        window.windows(neg.len()).any(|w| w == neg.as_slice())
                    });
                    out.insert((term.join(" "), !negated));
                    i += term.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Set-overlap F1 over extracted (entity, polarity) pairs. Two texts with
/// no extractable entities agree vacuously and score 1.
pub fn entity_f1(candidate: &str, reference: &str, lexicon: &EntityLexicon) -> Score {
    let c = lexicon.extract(candidate);
    let r = lexicon.extract(reference);
    if c.is_empty() && r.is_empty() {
        return Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    if c.is_empty() || r.is_empty() {
        return Score::ZERO;
    }
    let inter = c.intersection(&r).count() as f64;
    Score::from_pr(inter / c.len() as f64, inter / r.len() as f64)
}

/// Arithmetic mean of per-example scores, in the given (example id)
/// order.
pub fn mean_scores(scores: &[Score]) -> Score {
    if scores.is_empty() {
        return Score::ZERO;
    }
    let n = scores.len() as f64;
    let mut p = 0.0;
    let mut r = 0.0;
    let mut f = 0.0;
    for s in scores {
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    Score {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}
