//! Independent oracles: a prefix-keyed toy decoder with brute-force search,
//! and BLEU by direct n-gram scanning.

use polydistill::eval::{length_penalty, StepDecoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distributions drawn from a seeded generator keyed on the
/// whole prefix, so every sequence has a well-defined probability.
pub struct Toy {
    pub vocab: usize,
    pub seed: u64,
    pub sharpness: f64,
}

pub const EOS: u32 = 0;
pub const BOS: u32 = u32::MAX;

impl Toy {
    pub fn logprobs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut key = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            key = key.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.random::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepDecoder for Toy {
    type State = Vec<u32>;

    fn bos(&self) -> u32 {
        BOS
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn initial_state(&self) -> Vec<u32> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<u32>], tokens: &[u32]) -> Vec<Vec<f64>> {
        states
            .iter_mut()
            .zip(tokens)
            .map(|(s, &t)| {
                if t != BOS {
                    s.push(t);
                }
                self.logprobs(s)
            })
            .collect()
    }
}

/// Best `(score, tokens)` over every output: eos-terminated sequences of
/// any length up to `max_len`, plus sequences cut off at `max_len`.
pub fn exhaustive(model: &Toy, alpha: f64, max_len: usize) -> (f64, Vec<u32>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut frontier = vec![(Vec::<u32>::new(), 0.0f64)];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for (prefix, lp) in &frontier {
            let row = model.logprobs(prefix);
            for tok in 0..model.vocab as u32 {
                let mut seq = prefix.clone();
                seq.push(tok);
                let total = lp + row[tok as usize];
                if tok == EOS || len == max_len {
                    let score = total / length_penalty(len, alpha);
                    if score > best.0 {
                        best = (score, seq);
                    }
                } else {
                    next.push((seq, total));
                }
            }
        }
        frontier = next;
    }
    best
}

/// Count of `gram` in `tokens`, by direct scanning.
pub fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

/// Corpus BLEU computed the slow way: every distinct hypothesis n-gram is
/// counted in both sides by scanning, clipped, and summed.
pub fn naive_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let mut matched = [0f64; 4];
    let mut total = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
        let rf: Vec<String> = rf.split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
        c += h.len() as f64;
        r += rf.len() as f64;
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                total[n - 1] += 1.0;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched[n - 1] += occurrences(&h, g).min(occurrences(&rf, g)) as f64;
            }
        }
    }
    if (0..4).any(|i| matched[i] == 0.0) || c == 0.0 {
        return 0.0;
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let geo = (0..4).map(|i| (matched[i] / total[i]).ln()).sum::<f64>() / 4.0;
    100.0 * bp * geo.exp()
}

/// Random hypothesis/reference pairs over `words` distinct tokens.
pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize, words: usize) -> (Vec<String>, Vec<String>) {
    let sentence = |rng: &mut ChaCha8Rng, len: usize| {
        (0..len)
            .map(|_| format!("w{}", rng.random_range(0..words)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let len = rng.random_range(1..15);
        let r = sentence(rng, len);
        // Half the hypotheses are edits of the reference, half are unrelated.
        let h = if rng.random_bool(0.5) {
            let mut kept = Vec::new();
            for w in r.split(' ') {
                if rng.random_bool(0.85) {
                    kept.push(if rng.random_bool(0.1) { "zz" } else { w });
                }
            }
            kept.join(" ")
        } else {
            let len = rng.random_range(0..15);
            sentence(rng, len)
        };
        hyps.push(h);
        refs.push(r);
    }
    (hyps, refs)
}
