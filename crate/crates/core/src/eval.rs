//! Beam search with length penalty and corpus-level BLEU.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel};
use crate::corpus::ParallelCorpus;
use crate::model::{ModelError, Params, TransformerDecoder};
use crate::Real;

const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis count {hyps} differs from reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot decode an empty source")]
    EmptySource,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A model that can be advanced one token at a time for many hypotheses.
pub trait StepDecoder {
    type State: Clone;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    fn initial_state(&self) -> Self::State;
    /// Feeds `tokens[i]` into `states[i]` and returns the next-token
    /// log-probabilities for each state.
    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in end-of-sentence unless `truncated`.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities divided by the length penalty.
    pub score: f64,
    pub log_prob: f64,
    pub truncated: bool,
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

struct Live<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
}

/// Beam search over at most `max_len` generated tokens. Each step keeps the
/// `beam` best expansions; those ending in end-of-sentence are set aside as
/// finished. Search stops once no live hypothesis can still beat the best
/// finished one.
pub fn beam_search<D: StepDecoder>(
    decoder: &D,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis, EvalError> {
    if beam == 0 {
        return Err(EvalError::ZeroBeam);
    }
    let eos = decoder.eos();
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: decoder.initial_state(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let best_of = |hs: &[Hypothesis]| {
        hs.iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max)
    };

    for step in 0..max_len {
        let last: Vec<u32> = live
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(decoder.bos()))
            .collect();
        let mut states: Vec<D::State> = live.iter().map(|h| h.state.clone()).collect();
        let logprobs = decoder.step(&mut states, &last);

        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (i, row) in logprobs.iter().enumerate() {
            for (k, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    candidates.push((live[i].log_prob + lp, k as u32, i));
                }
            }
        }
        let order = |a: &(f64, u32, usize), b: &(f64, u32, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        };
        if candidates.len() > beam {
            candidates.select_nth_unstable_by(beam, order);
            candidates.truncate(beam);
        }
        candidates.sort_by(order);

        let len = step + 1;
        let mut next = Vec::with_capacity(beam);
        for (log_prob, tok, i) in candidates {
            let mut tokens = live[i].tokens.clone();
            tokens.push(tok);
            if tok == eos || len == max_len {
                finished.push(Hypothesis {
                    score: log_prob / length_penalty(len, alpha),
                    tokens,
                    log_prob,
                    truncated: tok != eos,
                });
            } else {
                next.push(Live {
                    tokens,
                    log_prob,
                    state: states[i].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !finished.is_empty() {
            // Log-probabilities only decrease, so a live hypothesis is at
            // best its current sum over the largest reachable penalty.
            let lp_max = length_penalty(len + 1, alpha).max(length_penalty(max_len, alpha));
            let bound = live
                .iter()
                .map(|h| h.log_prob / lp_max)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_of(&finished) >= bound {
                break;
            }
        }
    }
    // First-found wins among equal scores.
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or(EvalError::EmptySource)
}

/// Argmax decoding, ties to the lower token id. Scored like a finished beam
/// hypothesis.
pub fn greedy_decode<D: StepDecoder>(decoder: &D, alpha: f64, max_len: usize) -> Hypothesis {
    let mut state = vec![decoder.initial_state()];
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = decoder.bos();
    for _ in 0..max_len {
        let row = &decoder.step(&mut state, &[last])[0];
        let (k, lp) = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (k, &lp)| {
                if lp > best.1 {
                    (k, lp)
                } else {
                    best
                }
            });
        log_prob += lp;
        last = k as u32;
        tokens.push(last);
        if last == decoder.eos() {
            break;
        }
    }
    Hypothesis {
        truncated: tokens.last() != Some(&decoder.eos()),
        score: log_prob / length_penalty(tokens.len(), alpha),
        log_prob,
        tokens,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 4,
            alpha: 1.0,
        }
    }
}

/// Decoding length cap for a source of `src_len` tokens.
pub fn decode_limit(src_len: usize, model_max: usize) -> usize {
    (2 * src_len + 10).min(model_max)
}

/// Beam-decodes one source sentence with a transformer.
pub fn translate<F: Real>(
    params: &Params<F>,
    src: &[u32],
    specials: crate::bpe::Specials,
    opts: DecodeOptions,
) -> Result<Hypothesis, EvalError> {
    if src.is_empty() {
        return Err(EvalError::EmptySource);
    }
    let decoder = TransformerDecoder::new(params, src, specials)?;
    let limit = decode_limit(src.len(), params.config.max_len);
    if opts.beam == 1 {
        return Ok(greedy_decode(&decoder, opts.alpha, limit));
    }
    beam_search(&decoder, opts.beam, opts.alpha, limit)
}

/// Decodes every source of a corpus in parallel; output is in corpus order.
pub fn translate_corpus<F: Real>(
    params: &Params<F>,
    corpus: &ParallelCorpus,
    opts: DecodeOptions,
) -> Result<Vec<Hypothesis>, EvalError> {
    corpus
        .examples
        .par_iter()
        .map(|e| translate(params, &e.src, corpus.specials, opts))
        .collect()
}

/// Decodes a corpus and scores it against its references at word level.
pub fn evaluate_corpus<F: Real>(
    params: &Params<F>,
    corpus: &ParallelCorpus,
    bpe: &BpeModel,
    opts: DecodeOptions,
) -> Result<(BleuReport, Vec<String>), EvalError> {
    let hyps = translate_corpus(params, corpus, opts)?;
    let hyp_text: Vec<String> = hyps
        .iter()
        .map(|h| bpe.decode(&h.tokens))
        .collect::<Result<_, _>>()?;
    let ref_text: Vec<String> = corpus
        .examples
        .iter()
        .map(|e| bpe.decode(&e.tgt))
        .collect::<Result<_, _>>()?;
    Ok((bleu(&hyp_text, &ref_text)?, hyp_text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// One-line summary in the style of `multi-bleu.perl`.
    pub fn summary(&self) -> String {
        let p = self.precisions.map(|x| x * 100.0);
        format!(
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            if self.ref_len == 0 {
                0.0
            } else {
                self.hyp_len as f64 / self.ref_len as f64
            },
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over whitespace-tokenized sentences, single reference, no
/// smoothing.
pub fn bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(&r, n);
            for (gram, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: [f64; MAX_ORDER] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}
