#![allow(dead_code)]

pub mod oracles;

use ndarray::Array3;
use polydistill::bpe::Specials;
use polydistill::corpus::{Batch, Example};
use polydistill::loss::TopKRecord;
use polydistill::model::{backward, forward, ModelConfig, Mode, Params, TargetWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SPECIALS: Specials = Specials {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        n_layers: 1,
        n_heads: 1,
        dropout: 0.1,
        vocab_size: 11,
        max_len: 16,
    }
}

/// Random examples over the non-special ids, each ending in eos.
pub fn random_examples(n: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = |rng: &mut ChaCha8Rng| {
                let len = rng.random_range(1..max_len);
                let mut v: Vec<u32> = (0..len).map(|_| rng.random_range(4..vocab as u32)).collect();
                v.push(SPECIALS.eos);
                v
            };
            let src = side(&mut rng);
            let tgt = side(&mut rng);
            Example { src, tgt }
        })
        .collect()
}

/// Random normalized top-`k` records, one per target position of `batch`.
pub fn random_records(batch: &Batch, k: usize, v: usize, seed: u64) -> Vec<Vec<(Vec<u32>, Vec<f32>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .tgt_lens
        .iter()
        .map(|&len| {
            (0..len)
                .map(|_| {
                    let mut ids: Vec<u32> = (0..v as u32).collect();
                    for i in 0..k {
                        let j = rng.random_range(i..v);
                        ids.swap(i, j);
                    }
                    ids.truncate(k);
                    let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.1f32..1.0)).collect();
                    let s: f32 = raw.iter().sum();
                    (ids, raw.iter().map(|p| p / s).collect())
                })
                .collect()
        })
        .collect()
}

pub fn views(recs: &[Vec<(Vec<u32>, Vec<f32>)>]) -> Vec<Vec<TopKRecord<'_>>> {
    recs.iter()
        .map(|row| {
            row.iter()
                .map(|(ids, p)| TopKRecord {
                    token_ids: ids,
                    probs: p,
                })
                .collect()
        })
        .collect()
}

pub fn batch_of(examples: &[Example]) -> Batch {
    let refs: Vec<(usize, &Example)> = examples.iter().enumerate().collect();
    Batch::from_examples(0, &refs, SPECIALS)
}

/// `-Σ w · logprobs` computed directly from the dense output.
pub fn implied_loss(logprobs: &Array3<f64>, w: &TargetWeights<f64>) -> f64 {
    let mut total = 0.0;
    for b in 0..w.batch {
        for t in 0..w.time {
            for &(k, x) in w.at(b, t) {
                total -= x * logprobs[[b, t, k as usize]];
            }
        }
    }
    total
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where the two one-sided slopes disagree, i.e. a ReLU
    /// switches inside `[-h, h]` and the central difference is meaningless.
    pub kinks: usize,
}

/// Compares analytic and central-difference gradients over every scalar
/// parameter. Dropout masks are reproduced by reseeding the generator for
/// each evaluation. The relative error uses `max(|a|, |n|, 1e-3)` as
/// denominator so exactly-zero gradients are compared absolutely.
pub fn gradient_check(params: &Params<f64>, batch: &Batch, w: &TargetWeights<f64>, h: f64) -> GradCheck {
    let seed = 17;
    let out = forward(params, batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let grads = backward(params, &out, w).unwrap();
    let loss_at = |values: Vec<f64>| {
        let p = Params::from_values(params.config.clone(), values);
        let o = forward(&p, batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        implied_loss(&o.logprobs, w)
    };
    let f0 = implied_loss(&out.logprobs, w);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    for i in 0..params.values.len() {
        let mut plus = params.values.clone();
        plus[i] += h;
        let mut minus = params.values.clone();
        minus[i] -= h;
        let (fp, fm) = (loss_at(plus), loss_at(minus));
        let numeric = (fp - fm) / (2.0 * h);
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-2 * numeric.abs().max(1.0) {
            report.kinks += 1;
            continue;
        }
        let analytic = grads.values[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}
